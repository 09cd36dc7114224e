# ==================================================
# File: slide_head.py
# Transformer enhancement, pooling, projection and classifier over VLAD blocks
# ==================================================

import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

import autodiff as ad
from errors import ConfigError
from pipeline_config import Config, HeadConfig

PREFIX = "head"
CLUSTER_EMBED = f"{PREFIX}.cluster_embed"
NO_DECAY = (CLUSTER_EMBED,)


@dataclass
class SlideHeadParams:
    config: HeadConfig
    feature_dim: int
    report_dim: int
    num_classes: int
    params: ad.ParameterSet
    num_clusters: int = 0

    @property
    def ff_hidden(self) -> int:
        return self.config.ff_hidden or 2 * self.feature_dim

    @property
    def classifier_hidden(self) -> int:
        return self.config.classifier_hidden or self.feature_dim

    def leaves(self) -> Dict[str, ad.Tensor]:
        return self.params.leaves()


@dataclass
class SlideEmbedding:
    h: ad.Tensor       # (d,) pooled tokens
    h_proj: ad.Tensor  # (t,) unit norm


def layer_key(layer: int, name: str) -> str:
    return f"{PREFIX}.l{layer}.{name}"


def init_params(config: HeadConfig, feature_dim: int, report_dim: int, num_classes: int,
                seed: int, dtype=np.float32, num_clusters: int = 0) -> SlideHeadParams:
    config.validate()
    if config.cluster_embedding and num_clusters < 1:
        raise ConfigError("cluster_embedding needs the codebook size")
    if feature_dim % config.num_heads:
        raise ConfigError(f"feature_dim {feature_dim} is not divisible by num_heads {config.num_heads}")
    if report_dim < 1 or num_classes < 2:
        raise ConfigError(f"need report_dim >= 1 and num_classes >= 2, got {report_dim}, {num_classes}")

    rng = np.random.default_rng([seed, 1])
    d = feature_dim
    head = SlideHeadParams(config, feature_dim, report_dim, num_classes, ad.ParameterSet({}), num_clusters)
    ff, hc = head.ff_hidden, head.classifier_hidden

    arrays = {}
    if config.cluster_embedding:
        arrays[CLUSTER_EMBED] = rng.normal(scale=Config.CLUSTER_EMBED_STD, size=(num_clusters, d)).astype(dtype)
    for layer in range(config.num_layers):
        arrays[layer_key(layer, "ln1.gamma")] = np.ones(d, dtype=dtype)
        arrays[layer_key(layer, "ln1.beta")] = np.zeros(d, dtype=dtype)
        for name in ("wq", "wk", "wv", "wo"):
            arrays[layer_key(layer, name)] = ad.glorot_uniform(rng, d, d, dtype)
        arrays[layer_key(layer, "ln2.gamma")] = np.ones(d, dtype=dtype)
        arrays[layer_key(layer, "ln2.beta")] = np.zeros(d, dtype=dtype)
        arrays[layer_key(layer, "ff.w1")] = ad.glorot_uniform(rng, d, ff, dtype)
        arrays[layer_key(layer, "ff.b1")] = np.zeros(ff, dtype=dtype)
        arrays[layer_key(layer, "ff.w2")] = ad.glorot_uniform(rng, ff, d, dtype)
        arrays[layer_key(layer, "ff.b2")] = np.zeros(d, dtype=dtype)

    arrays[f"{PREFIX}.proj.w"] = ad.glorot_uniform(rng, d, report_dim, dtype)
    arrays[f"{PREFIX}.cls.w1"] = ad.glorot_uniform(rng, d, hc, dtype)
    arrays[f"{PREFIX}.cls.b1"] = np.zeros(hc, dtype=dtype)
    arrays[f"{PREFIX}.cls.w2"] = ad.glorot_uniform(rng, hc, num_classes, dtype)
    arrays[f"{PREFIX}.cls.b2"] = np.zeros(num_classes, dtype=dtype)

    head.params = ad.ParameterSet(arrays)
    return head


def _attention(config: HeadConfig, p: Dict[str, ad.Tensor], layer: int, x: ad.Tensor) -> ad.Tensor:
    d = x.shape[1]
    d_head = d // config.num_heads
    q = ad.matmul(x, p[layer_key(layer, "wq")])
    k = ad.matmul(x, p[layer_key(layer, "wk")])
    v = ad.matmul(x, p[layer_key(layer, "wv")])

    outputs = []
    for h in range(config.num_heads):
        lo, hi = h * d_head, (h + 1) * d_head
        if config.num_heads == 1:
            qh, kh, vh = q, k, v
        else:
            qh, kh, vh = ad.slice_cols(q, lo, hi), ad.slice_cols(k, lo, hi), ad.slice_cols(v, lo, hi)
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(d_head))
        outputs.append(ad.matmul(ad.softmax(scores), vh))

    merged = outputs[0] if len(outputs) == 1 else ad.concat(outputs, axis=1)
    return ad.matmul(merged, p[layer_key(layer, "wo")])


def _block(config: HeadConfig, p: Dict[str, ad.Tensor], layer: int, x: ad.Tensor) -> ad.Tensor:
    """Pre-norm attention and feed-forward, each with a residual connection"""
    normed = ad.layer_norm(x, p[layer_key(layer, "ln1.gamma")], p[layer_key(layer, "ln1.beta")])
    x = ad.add(x, _attention(config, p, layer, normed))

    normed = ad.layer_norm(x, p[layer_key(layer, "ln2.gamma")], p[layer_key(layer, "ln2.beta")])
    hidden = ad.gelu(ad.add(ad.matmul(normed, p[layer_key(layer, "ff.w1")]), p[layer_key(layer, "ff.b1")]))
    ff = ad.add(ad.matmul(hidden, p[layer_key(layer, "ff.w2")]), p[layer_key(layer, "ff.b2")])
    return ad.add(x, ff)


def enhance(head: SlideHeadParams, blocks: ad.Tensor,
            leaves: Optional[Dict[str, ad.Tensor]] = None) -> SlideEmbedding:
    """K cluster tokens of width d -> pooled h and projected unit-norm h_proj"""
    if blocks.ndim != 2 or blocks.shape[1] != head.feature_dim:
        raise ConfigError(f"slide head expects (K, {head.feature_dim}) tokens, got {blocks.shape}")
    p = leaves if leaves is not None else head.leaves()
    x = blocks
    if CLUSTER_EMBED in p:
        if blocks.shape[0] != head.num_clusters:
            raise ConfigError(f"slide head was built for {head.num_clusters} clusters, got {blocks.shape[0]} tokens")
        x = ad.add(x, p[CLUSTER_EMBED])
    for layer in range(head.config.num_layers):
        x = _block(head.config, p, layer, x)
    h = ad.mean(x, axis=0)
    projected = ad.matmul(ad.reshape(h, (1, head.feature_dim)), p[f"{PREFIX}.proj.w"])
    h_proj = ad.l2_normalize(ad.reshape(projected, (head.report_dim,)))
    return SlideEmbedding(h, h_proj)


def classify(head: SlideHeadParams, embedding: SlideEmbedding,
             leaves: Optional[Dict[str, ad.Tensor]] = None) -> ad.Tensor:
    """Raw logits of a one-hidden-layer GELU MLP"""
    p = leaves if leaves is not None else head.leaves()
    x = ad.reshape(embedding.h, (1, head.feature_dim))
    hidden = ad.gelu(ad.add(ad.matmul(x, p[f"{PREFIX}.cls.w1"]), p[f"{PREFIX}.cls.b1"]))
    logits = ad.add(ad.matmul(hidden, p[f"{PREFIX}.cls.w2"]), p[f"{PREFIX}.cls.b2"])
    return ad.reshape(logits, (head.num_classes,))
