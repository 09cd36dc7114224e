# ==================================================
# File: debug_tools.py
# Runtime self-checks behind the `check` command
# ==================================================

import math
import tempfile
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

import autodiff as ad
import codebook as cbk
import contrastive
import trainer
import vlad
from data_io import SyntheticSpec, generate
from errors import DrslError
from memory_bank import MemoryBank
from pipeline_config import RunConfig

PASSED = 'PASSED'
FAILED = 'FAILED'


def naive_vlad(centroids: np.ndarray, features: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Per-tile loop with an explicit distance scan; shares no code with vlad.py"""
    k, d = centroids.shape
    blocks = [[0.0] * d for _ in range(k)]
    for f in features:
        best, best_dist = 0, None
        for j in range(k):
            dist = sum((float(f[i]) - float(centroids[j][i])) ** 2 for i in range(d))
            if best_dist is None or dist < best_dist:
                best, best_dist = j, dist
        for i in range(d):
            blocks[best][i] += float(f[i]) - float(centroids[best][i])
    flat = [v for block in blocks for v in block]
    norm = math.sqrt(sum(v * v for v in flat))
    if norm <= eps:
        return np.asarray(flat)
    return np.asarray([v / norm for v in flat])


def gradient_check_instance(seed: int = 0, batch: int = 2, r: int = 2, k: int = 2, d: int = 4):
    """Tiny float64 run with reports: (run, state, codebook, samples)"""
    spec = SyntheticSpec(num_classes=2, slides_per_class=batch // 2 or 1, min_tiles=5, max_tiles=5,
                         input_dim=4, report_dim=3, seed=seed)
    dataset = generate(spec)
    run = RunConfig(seed=seed, dtype="float64")
    run.encoder.input_dim, run.encoder.hidden_dims, run.encoder.feature_dim = 4, [4], d
    run.codebook.k = k
    run.train.tiles_per_slide, run.train.batch_size, run.train.freeze_epochs = r, batch, 0
    run.validate()

    state = trainer.init_state(run, trainer.model_dims(run, dataset))
    bank, codebook = trainer.prepare(dataset, run, state)
    trainer.apply_stage(state, run, 0)
    samples = [trainer.sample_slide(rec, bank, r, state.rng) for rec in dataset]
    return run, state, codebook, samples


def end_to_end_grad_check(run: RunConfig, state, codebook, samples,
                          tol: float = 1e-4) -> Tuple[ad.GradCheckReport, List[str]]:
    """Every parameter of the total batch loss against central differences; also returns the names checked"""
    names = list(state.arrays())
    arrays = [state.arrays()[n] for n in names]

    def total_loss(tensors: List[ad.Tensor]) -> ad.Tensor:
        leaves = dict(zip(names, tensors))
        return trainer.compute_batch_loss(run, state, codebook, samples, leaves).total

    return ad.grad_check(total_loss, arrays, tol=tol), names


class DebugTools:
    """Diagnostics for the numeric core, encoders and persistence"""

    @staticmethod
    def test_vlad_oracle(instances: int = 100, seed: int = 0) -> Dict:
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(instances):
            k = int(rng.integers(2, 5))
            d = int(rng.integers(2, 9))
            n = int(rng.integers(1, 21))
            cb = cbk.Codebook(rng.normal(size=(k, d)))
            features = rng.normal(size=(n, d))
            fast = vlad.encode_all(cb, features)
            slow = naive_vlad(cb.centroids, features)
            worst = max(worst, float(np.max(np.abs(fast - slow))))
        return {
            'test': 'VLAD oracle equivalence',
            'status': PASSED if worst <= 1e-10 else FAILED,
            'details': f"{instances} instances, max abs diff {worst:.3e}",
        }

    @staticmethod
    def test_gradient_check(seed: int = 0, tol: float = 1e-4) -> Dict:
        report, names = end_to_end_grad_check(*gradient_check_instance(seed), tol=tol)
        worst = names[report.worst_param] if report.worst_param >= 0 else "-"
        return {
            'test': 'End-to-end gradient check',
            'status': PASSED if report.passed else FAILED,
            'details': f"{report.checked} entries, worst {report.worst_error:.3e} at {worst}{list(report.worst_index)}",
        }

    @staticmethod
    def test_closed_form_losses() -> Dict:
        checks = []

        same = ad.l2_normalize(ad.Tensor(np.ones((4, 3))))
        s_str, s_rts = contrastive.similarity_matrices(same, same.data, ad.Tensor(0.0), ad.Tensor(0.0))
        checks.append(abs(contrastive.contrastive_loss(s_str, s_rts, [True] * 4).item() - math.log(4)))

        one = ad.l2_normalize(ad.Tensor(np.ones((1, 3))))
        s_str, s_rts = contrastive.similarity_matrices(one, one.data, ad.Tensor(0.0), ad.Tensor(0.0))
        checks.append(abs(contrastive.contrastive_loss(s_str, s_rts, [True]).item()))

        for classes in (2, 3, 5):
            ce = ad.softmax_cross_entropy(ad.Tensor(np.zeros(classes)), 0).item()
            checks.append(abs(ce - math.log(classes)))

        worst = max(checks)
        return {
            'test': 'Closed-form loss cases',
            'status': PASSED if worst <= 1e-9 else FAILED,
            'details': f"max deviation {worst:.3e}",
        }

    @staticmethod
    def test_round_trips(seed: int = 0, workdir: Optional[Path] = None) -> Dict:
        rng = np.random.default_rng(seed)
        bank = MemoryBank(4)
        for s in range(3):
            bank.insert_slide(f"slide_{s}", rng.normal(size=(5, 4)))
        cb = cbk.build(bank.all_features(), 3, seed=seed)

        with tempfile.TemporaryDirectory(dir=workdir) as tmp:
            bank.save(Path(tmp) / "bank.drsb")
            cbk.save(cb, Path(tmp) / "codebook.drsc")
            bank_ok = MemoryBank.load(Path(tmp) / "bank.drsb").to_bytes() == bank.to_bytes()
            loaded = cbk.load(Path(tmp) / "codebook.drsc", expected_dim=4)
            cb_ok = loaded.centroids.tobytes() == cb.centroids.tobytes()

        return {
            'test': 'Bank and codebook round trips',
            'status': PASSED if bank_ok and cb_ok else FAILED,
            'details': f"bank={'ok' if bank_ok else 'mismatch'} codebook={'ok' if cb_ok else 'mismatch'}",
        }

    @staticmethod
    def run_comprehensive_test(seed: int = 0) -> Dict:
        results = {
            'tests': [],
            'summary': {'passed': 0, 'failed': 0}
        }

        checks = (
            ('VLAD oracle equivalence', lambda: DebugTools.test_vlad_oracle(seed=seed)),
            ('End-to-end gradient check', lambda: DebugTools.test_gradient_check(seed=seed)),
            ('Closed-form loss cases', DebugTools.test_closed_form_losses),
            ('Bank and codebook round trips', lambda: DebugTools.test_round_trips(seed=seed)),
        )
        for name, check in checks:
            try:
                outcome = check()
            except DrslError as e:
                outcome = {'test': name, 'status': FAILED, 'details': str(e)}
            results['tests'].append(outcome)
            key = 'passed' if outcome['status'] == PASSED else 'failed'
            results['summary'][key] += 1

        return results


def summary_lines(results: Dict) -> Tuple[str, ...]:
    return tuple(f"{t['status']:<7} {t['test']}: {t['details']}" for t in results['tests'])
