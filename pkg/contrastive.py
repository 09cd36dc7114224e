# ==================================================
# File: contrastive.py
# Bidirectional slide/report contrastive loss with learnable temperatures
# ==================================================

import math
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
from errors import DimensionError
from pipeline_config import Config

LOG_SIGMA1 = "temperature.log_sigma1"
LOG_SIGMA2 = "temperature.log_sigma2"
TEMPERATURE_NAMES = (LOG_SIGMA1, LOG_SIGMA2)


def init_temperatures(dtype=np.float32) -> ad.ParameterSet:
    """Both scales start at 1/0.07, stored as logs so they stay positive"""
    start = math.log(Config.INITIAL_TEMPERATURE)
    return ad.ParameterSet({
        LOG_SIGMA1: np.asarray(start, dtype=dtype),
        LOG_SIGMA2: np.asarray(start, dtype=dtype),
    })


def sigmas(temperatures: ad.ParameterSet) -> Tuple[float, float]:
    return (float(np.exp(temperatures.arrays[LOG_SIGMA1])),
            float(np.exp(temperatures.arrays[LOG_SIGMA2])))


def similarity_matrices(slides: ad.Tensor, reports, log_sigma1: ad.Tensor,
                        log_sigma2: ad.Tensor) -> Tuple[ad.Tensor, ad.Tensor]:
    """S_str = s1 * V T^T and S_rts = s2 * (V T^T)^T.

    Both share one product so equal temperatures give an exact transpose.
    """
    reports = ad.as_tensor(reports, dtype=slides.dtype)
    if slides.ndim != 2 or reports.ndim != 2 or slides.shape != reports.shape:
        raise DimensionError("similarity_matrices", slides.shape, reports.shape)
    products = ad.matmul(slides, ad.transpose(reports))
    s_str = ad.mul_scalar(ad.exp(log_sigma1), products)
    s_rts = ad.mul_scalar(ad.exp(log_sigma2), ad.transpose(products))
    return s_str, s_rts


def contrastive_loss(s_str: ad.Tensor, s_rts: ad.Tensor, mask: Sequence[bool],
                     report_less_negatives: bool = False) -> ad.Tensor:
    """Mean of the slide->report and report->slide cross-entropies.

    Only slides with a report are anchors. Report-less slides are removed as
    candidates too unless ``report_less_negatives`` keeps them as negatives
    in the report->slide direction.
    """
    n = s_str.shape[0]
    if s_str.shape != (n, n) or s_rts.shape != (n, n) or len(mask) != n:
        raise DimensionError("contrastive_loss", s_str.shape, s_rts.shape, (len(mask),))
    present = np.flatnonzero(np.asarray(mask, dtype=bool))
    if present.size == 0:
        return ad.Tensor(np.asarray(0.0, dtype=s_str.dtype))

    targets = np.arange(present.size)
    loss_str = ad.cross_entropy(ad.index_cols(ad.index_rows(s_str, present), present), targets)

    rts_rows = ad.index_rows(s_rts, present)
    if report_less_negatives:
        loss_rts = ad.cross_entropy(rts_rows, present)
    else:
        loss_rts = ad.cross_entropy(ad.index_cols(rts_rows, present), targets)

    return ad.scale(ad.add(loss_str, loss_rts), 0.5)


def batch_loss(slides: ad.Tensor, reports: np.ndarray, mask: Sequence[bool],
               leaves: Dict[str, ad.Tensor], report_less_negatives: bool = False) -> ad.Tensor:
    s_str, s_rts = similarity_matrices(slides, reports, leaves[LOG_SIGMA1], leaves[LOG_SIGMA2])
    return contrastive_loss(s_str, s_rts, mask, report_less_negatives)


def report_matrix(reports: Sequence[Optional[np.ndarray]], report_dim: int,
                  dtype=np.float32) -> Tuple[np.ndarray, np.ndarray]:
    """Stack optional report vectors; absent rows are zero and masked out"""
    matrix = np.zeros((len(reports), report_dim), dtype=dtype)
    mask = np.zeros(len(reports), dtype=bool)
    for row, vector in enumerate(reports):
        if vector is None:
            continue
        if np.shape(vector) != (report_dim,):
            raise DimensionError(f"report row {row}", np.shape(vector), (report_dim,))
        matrix[row] = vector
        mask[row] = True
    return matrix, mask
