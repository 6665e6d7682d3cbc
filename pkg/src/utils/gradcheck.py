"""
Finite-difference checks of the reverse-mode gradients.

Each case builds a scalar loss from freshly drawn Parameters. For every
parameter a random subset of entries is perturbed by +-step and the central
difference is compared to the tape gradient.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.core.diffcore import (
    AttentionParams,
    Parameter,
    Tensor,
    backward,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    multi_head_attention,
    mul,
    relu,
    segment_mean,
    softmax,
    take,
    tensor_sum,
)
from src.core.losses import LossWeights, cluster_loss, combine_losses, instance_loss, set_loss
from src.core.set_classifier import SetClassifierConfig, SetClassifierModel

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
# stencil for the full model: +-step must not straddle a rectifier kink
MODEL_STEP = 1e-6
DEFAULT_TOLERANCE = 1e-5
ERROR_FLOOR = 1e-3

LossFn = Callable[[], Tensor]


@dataclass
class GradCheckResult:
    case: str
    parameter: str
    entries: int
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    results: List[GradCheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.results), default=0.0)

    def failures(self) -> List[GradCheckResult]:
        return [r for r in self.results if not r.passed]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ERROR_FLOOR) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numeric_gradient(loss_fn: LossFn, param: Parameter, flat_indices: Sequence[int], step: float = DEFAULT_STEP) -> np.ndarray:
    grads = np.empty(len(flat_indices), dtype=np.float64)
    for j, i in enumerate(flat_indices):
        index = np.unravel_index(int(i), param.data.shape)
        original = param.data[index]
        param.data[index] = original + step
        upper = loss_fn().item()
        param.data[index] = original - step
        lower = loss_fn().item()
        param.data[index] = original
        grads[j] = (upper - lower) / (2.0 * step)
    return grads


def check_gradients(
    case: str,
    loss_fn: LossFn,
    params: Sequence[Parameter],
    rng: np.random.Generator,
    entries_per_param: Optional[int] = None,
    step: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
) -> List[GradCheckResult]:
    for p in params:
        p.grad = None
    backward(loss_fn(), params)

    results = []
    for p in params:
        size = p.data.size
        if entries_per_param is None or entries_per_param >= size:
            picked = np.arange(size)
        else:
            picked = np.sort(rng.choice(size, size=entries_per_param, replace=False))
        numeric = numeric_gradient(loss_fn, p, picked, step)
        err = float(relative_error(p.grad.reshape(-1)[picked], numeric).max())
        results.append(GradCheckResult(case, p.name, int(picked.size), err, err < tolerance))
    return results


def _param(rng: np.random.Generator, name: str, *shape, scale: float = 1.0) -> Parameter:
    return Parameter(rng.normal(0.0, scale, size=shape), name=name)


def _away_from_zero(rng: np.random.Generator, *shape) -> np.ndarray:
    values = rng.uniform(0.1, 1.0, size=shape)
    return values * rng.choice([-1.0, 1.0], size=shape)


def _attention_params(rng: np.random.Generator, d: int) -> AttentionParams:
    parts = []
    for tag in ("q", "k", "v", "o"):
        parts.append(_param(rng, f"w_{tag}", d, d, scale=0.3))
        parts.append(_param(rng, f"b_{tag}", d, scale=0.1))
    return AttentionParams(*parts)


def _attention_param_list(params: AttentionParams) -> List[Parameter]:
    return [params.w_q, params.b_q, params.w_k, params.b_k, params.w_v, params.b_v, params.w_o, params.b_o]


def op_cases(rng: np.random.Generator) -> Dict[str, Tuple[LossFn, List[Parameter]]]:
    """Small randomized instances of every differentiable op."""
    cases: Dict[str, Tuple[LossFn, List[Parameter]]] = {}

    x, w, b = _param(rng, "x", 4, 5), _param(rng, "weight", 5, 3), _param(rng, "bias", 3)
    r = rng.normal(size=(4, 3))
    cases["linear"] = (lambda: tensor_sum(mul(linear(x, w, b), Tensor(r))), [x, w, b])

    a, m = _param(rng, "a", 2, 3, 4), _param(rng, "b", 2, 4, 2)
    r_mm = rng.normal(size=(2, 3, 2))
    cases["matmul"] = (lambda: tensor_sum(mul(matmul(a, m), Tensor(r_mm))), [a, m])

    xr = Parameter(_away_from_zero(rng, 6, 4), name="x")
    r_relu = rng.normal(size=(6, 4))
    cases["relu"] = (lambda: tensor_sum(mul(relu(xr), Tensor(r_relu))), [xr])

    xl = Parameter(rng.uniform(0.5, 2.0, size=(3, 4)), name="x")
    r_log = rng.normal(size=(3, 4))
    cases["log"] = (lambda: tensor_sum(mul(log(xl), Tensor(r_log))), [xl])

    xs = _param(rng, "logits", 3, 5)
    r_sm = rng.normal(size=(3, 5))
    cases["softmax"] = (lambda: tensor_sum(mul(softmax(xs), Tensor(r_sm))), [xs])
    cases["log_softmax"] = (lambda: tensor_sum(mul(log_softmax(xs), Tensor(r_sm))), [xs])

    xn, gain, shift = _param(rng, "x", 3, 6), _param(rng, "gain", 6), _param(rng, "shift", 6)
    r_ln = rng.normal(size=(3, 6))
    cases["layer_norm"] = (lambda: tensor_sum(mul(layer_norm(xn, gain, shift), Tensor(r_ln))), [xn, gain, shift])

    xt = _param(rng, "x", 5, 3)
    rows = np.array([4, 0, 0, 2])
    r_take = rng.normal(size=(4, 3))
    cases["take"] = (lambda: tensor_sum(mul(take(xt, rows), Tensor(r_take))), [xt])

    xg = _param(rng, "x", 6, 3)
    segments = np.array([0, 1, 0, 2, 2, 2])
    r_seg = rng.normal(size=(3, 3))
    cases["segment_mean"] = (lambda: tensor_sum(mul(segment_mean(xg, segments, 3), Tensor(r_seg))), [xg])

    tokens = _param(rng, "tokens", 3, 8)
    attn = _attention_params(rng, 8)
    r_attn = rng.normal(size=(3, 8))
    cases["attention"] = (
        lambda: tensor_sum(mul(multi_head_attention(tokens, attn, 2), Tensor(r_attn))),
        [tokens] + _attention_param_list(attn),
    )

    batch_tokens = _param(rng, "tokens", 2, 4, 8)
    masked_attn = _attention_params(rng, 8)
    key_mask = np.array([[True, True, True, True], [True, True, False, False]])
    r_masked = rng.normal(size=(2, 4, 8))
    cases["masked_attention"] = (
        lambda: tensor_sum(mul(multi_head_attention(batch_tokens, masked_attn, 2, key_mask), Tensor(r_masked))),
        [batch_tokens] + _attention_param_list(masked_attn),
    )

    set_logits = _param(rng, "set_logits", 6)
    label = np.array([0.5, 0.25, 0.0, 0.25, 0.0, 0.0])
    cases["set_loss"] = (lambda: set_loss(label, set_logits), [set_logits])

    token_logits = _param(rng, "token_logits", 5, 4)
    categories = np.array([0, 3, 3, 1, 0])
    identities = np.array([7, 7, 2, 2, 9])
    cases["instance_loss"] = (lambda: instance_loss(categories, token_logits), [token_logits])
    cases["cluster_loss"] = (lambda: cluster_loss(categories, identities, token_logits), [token_logits])
    return cases


def model_case(
    rng: np.random.Generator,
    model_dim: int = 64,
    heads: int = 4,
    encoder_layers: int = 2,
    num_classes: int = 10,
    length: int = 8,
    input_dim: int = 16,
) -> Tuple[LossFn, List[Parameter]]:
    """The full weighted training loss of a small set classifier on one tracklet."""
    config = SetClassifierConfig(
        input_dim=input_dim,
        model_dim=model_dim,
        heads=heads,
        encoder_layers=encoder_layers,
        num_classes=num_classes,
    )
    model = SetClassifierModel(config, rng=rng)
    features = rng.normal(size=(length, input_dim))
    categories = rng.integers(0, num_classes, size=length)
    identities = rng.integers(0, max(2, length // 3), size=length)
    label = np.bincount(categories, minlength=num_classes) / length
    weights = LossWeights(w_sc=1.0, w_ins=1.0, w_cluster=1.0)

    def loss_fn() -> Tensor:
        out = model.forward(features)
        combined, _ = combine_losses(
            set_loss(label, out.set_logits),
            instance_loss(categories, out.instance_logits),
            cluster_loss(categories, identities, out.cluster_logits),
            weights,
        )
        return combined

    return loss_fn, model.parameters()


def run_suite(
    seed: int = 0,
    entries_per_param: int = 6,
    tolerance: float = DEFAULT_TOLERANCE,
    step: float = DEFAULT_STEP,
    include_model: bool = True,
    model_step: float = MODEL_STEP,
) -> GradCheckReport:
    """Check every op case in full and a sampled subset of each model parameter."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for name, (loss_fn, params) in op_cases(rng).items():
        report.results.extend(check_gradients(name, loss_fn, params, rng, None, step, tolerance))
    if include_model:
        loss_fn, params = model_case(rng)
        report.results.extend(check_gradients("set_classifier", loss_fn, params, rng, entries_per_param, model_step, tolerance))
    report.seconds = time.perf_counter() - start

    if report.passed:
        logger.info(f"Gradient check passed: {len(report.results)} tensors, max rel. error {report.max_rel_error:.2e}")
    else:
        for failure in report.failures():
            logger.error(f"Gradient mismatch in {failure.case}/{failure.parameter}: {failure.max_rel_error:.2e}")
    return report
