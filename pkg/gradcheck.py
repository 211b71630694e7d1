"""
Verification suites
Finite-difference checks for every primitive, every attention block, the
sampling layer, the ETB fusion variants and the end-to-end toy backbone, plus
exact oracles for dense attention, dense convolution, FPS and both
nearest-neighbour searches. All checks run at 64-bit.
"""

import logging
from contextlib import nullcontext
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from attention import LXformer, SCformer, GXformer, StageIndex, sparse_conv
from backbone import ETB, EventFeatures, EventSamplingLayer, EventTransformer
from config import AttentionConfig, ModelConfig
from errors import VerificationFailed
from events_io import EventStream, NormalizedEvents, normalize_events
from geometry import build_sparse_grid, farthest_point_sampling, group_nearest, knn_temporal
from numerics import (Mlp, Tensor, add, check_gradients, concat, cross_entropy, gelu, inject_fault,
                      layer_norm, log_softmax, matmul, max_, mul, precision, relative_error, relu, reshape,
                      rng_for, scaled_error, segment_sum, softmax, sub, sum_, take)

logger = logging.getLogger(__name__)

PRIMITIVE_TOL = 1e-5
BLOCK_TOL = 1e-4
ORACLE_TOL = 1e-6
BLOCK_MAX_COORDS = 12

# backward rules that a fault can be injected into
BACKWARD_RULES = ("add", "sub", "mul", "matmul", "reshape", "sum", "max", "concat", "take", "segment_sum",
                  "relu", "gelu", "softmax", "log_softmax", "layer_norm", "cross_entropy", "sparse_conv")


@dataclass
class CheckResult:
    """error is what the threshold applies to: the scaled error for gradient
    checks, the largest deviation for oracles. relative is the plain relative
    gradient error, reported alongside."""

    name: str
    kind: str
    error: float
    threshold: float
    instances: int
    relative: Optional[float] = None

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.threshold)

    def to_line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        label = "scaled_err" if self.kind != "oracle" else "max_dev"
        line = f"{status}\t{self.kind}\t{self.name}\t{label}={self.error:.3e}"
        if self.relative is not None:
            line += f"\trel_err={self.relative:.3e}"
        return line + f"\ttol={self.threshold:.0e}\tn={self.instances}"


Builder = Callable[[np.random.Generator], Tuple[Callable[[], Tensor], List[Tensor]]]


def _leaf(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _projected(out_fn: Callable[[], Tensor], shape, rng: np.random.Generator) -> Callable[[], Tensor]:
    """Scalar sum(out * W) for a fixed random W"""
    weights = Tensor(rng.standard_normal(shape))
    return lambda: sum_(out_fn() * weights)


def _unary(op: Callable[[Tensor], Tensor], shape=(4, 5), away_from_zero: bool = False) -> Builder:
    def build(rng):
        x = _leaf(rng, *shape)
        if away_from_zero:
            x.data += np.sign(x.data) * 0.05
        out_shape = op(x).shape
        return _projected(lambda: op(x), out_shape, rng), [x]
    return build


def _binary(op, shape_a, shape_b) -> Builder:
    def build(rng):
        a, b = _leaf(rng, *shape_a), _leaf(rng, *shape_b)
        return _projected(lambda: op(a, b), op(a, b).shape, rng), [a, b]
    return build


def _build_take(rng):
    x = _leaf(rng, 5, 3)
    index = rng.integers(0, 5, (4, 2))
    return _projected(lambda: take(x, index), (4, 2, 3), rng), [x]


def _build_segment_sum(rng):
    x = _leaf(rng, 6, 3)
    ids = rng.integers(0, 3, 6)
    return _projected(lambda: segment_sum(x, ids, 3), (3, 3), rng), [x]


def _build_masked_softmax(rng):
    x = _leaf(rng, 4, 5)
    mask = rng.random((4, 5)) < 0.6
    mask[:, 0] = True
    return _projected(lambda: softmax(x, axis=1, mask=mask), (4, 5), rng), [x]


def _build_layer_norm(rng):
    x, gain, bias = _leaf(rng, 4, 6), _leaf(rng, 6), _leaf(rng, 6)
    return _projected(lambda: layer_norm(x, gain, bias), (4, 6), rng), [x, gain, bias]


def _build_cross_entropy(rng):
    logits = _leaf(rng, 4, 5)
    labels = rng.integers(0, 5, 4)
    return (lambda: cross_entropy(logits, labels)), [logits]


def _build_mlp(rng):
    mlp = Mlp.build(5, 4, rng, hidden=7)
    x = _leaf(rng, 3, 5)
    return _projected(lambda: mlp(x), (3, 4), rng), [x, *mlp.parameters()]


PRIMITIVES: Dict[str, Builder] = {
    "add": _binary(add, (3, 4), (4,)),
    "sub": _binary(sub, (3, 4), (3, 1)),
    "mul": _binary(mul, (3, 4), (3, 4)),
    "matmul": _binary(matmul, (2, 3, 4), (4, 5)),
    "reshape": _unary(lambda x: reshape(x, (2, 10))),
    "sum": _unary(lambda x: sum_(x, axis=1), shape=(3, 4, 2)),
    "max": _unary(lambda x: max_(x, axis=1)),
    "concat": _binary(lambda a, b: concat([a, b], axis=1), (3, 2), (3, 4)),
    "take": _build_take,
    "segment_sum": _build_segment_sum,
    "relu": _unary(relu, away_from_zero=True),
    "gelu": _unary(gelu),
    "softmax": _unary(lambda x: softmax(x, axis=1)),
    "softmax_masked": _build_masked_softmax,
    "log_softmax": _unary(lambda x: log_softmax(x, axis=1)),
    "layer_norm": _build_layer_norm,
    "cross_entropy": _build_cross_entropy,
    "mlp": _build_mlp,
}


# composed blocks --------------------------------------------------------------

def random_events(rng: np.random.Generator, n: int, dims=(8, 8)) -> NormalizedEvents:
    """n events on a small sensor so spatial windows hold several active sites"""
    height, width = dims
    stream = EventStream(rng.integers(0, width, n), rng.integers(0, height, n), rng.integers(0, 10_000, n),
                         np.where(rng.random(n) < 0.5, 1, -1), dims)
    return normalize_events(stream)


def _block_check(make_block, n: int = 24, channels: int = 6) -> Builder:
    def build(rng):
        block = make_block(channels, rng)
        events = random_events(rng, n)
        F = _leaf(rng, n, channels)
        index = StageIndex(events)
        return _projected(lambda: block(events, F, index), (n, channels), rng), [F, *block.parameters()]
    return build


def _build_sparse_conv(rng):
    events = random_events(rng, 20)
    grid = build_sparse_grid(events.pixel_x, events.pixel_y, *events.sensor_dims)
    features = _leaf(rng, grid.num_sites, 3)
    kernel = _leaf(rng, 9, 3, 4)
    return _projected(lambda: sparse_conv(grid, features, kernel), (grid.num_sites, 4), rng), [features, kernel]


def _build_sampling(rng):
    layer = EventSamplingLayer(4, 2, 4, rng)
    events = random_events(rng, 32)
    F = _leaf(rng, 32, 4)
    out = lambda: layer(EventFeatures(events, F)).features
    return _projected(out, (8, 8), rng), [F, *layer.parameters()]


def _etb_check(fusion: str) -> Builder:
    def build(rng):
        attention = AttentionConfig(M=4, r=8, window=3, spconv_kernel=3, spconv_channels=[4])
        block = ETB("LSG", 4, attention, rng, fusion)
        events = random_events(rng, 20)
        F = _leaf(rng, 20, 4)
        index = StageIndex(events)
        out = lambda: block(EventFeatures(events, F), index).features
        return _projected(out, (20, 4), rng), [F, *block.parameters()]
    return build


def toy_config() -> ModelConfig:
    return ModelConfig(C=4, num_classes=3, head_widths=[8],
                       attention=AttentionConfig(M=4, r=8, spconv_channels=[4, 16, 32]))


def _build_backbone(rng):
    model = EventTransformer(toy_config(), seed=int(rng.integers(0, 2 ** 31)))
    events = random_events(rng, 64, dims=(12, 12))
    label = int(rng.integers(0, 3))
    return (lambda: cross_entropy(model(events), [label])), [model.embed.weight, model.embed.bias]


BLOCKS: Dict[str, Builder] = {
    "lxformer": _block_check(lambda c, rng: LXformer(c, c, 5, rng)),
    "scformer": _block_check(lambda c, rng: SCformer(c, c, 3, 3, rng)),
    "gxformer": _block_check(lambda c, rng: GXformer(c, c, 8, rng)),
    "sparse_conv": _build_sparse_conv,
    "sampling": _build_sampling,
    "etb_serial": _etb_check("serial"),
    "etb_parallel": _etb_check("parallel"),
    "etb_concat": _etb_check("concat"),
}


def _run_gradient_suite(name: str, kind: str, build: Builder, tol: float, instances: int, seed: int,
                        stream: int, max_coords: Optional[int]) -> CheckResult:
    worst = relative = 0.0
    for i in range(instances):
        fn, inputs = build(rng_for(seed, stream, i))
        errors = check_gradients(fn, inputs, max_coords=max_coords, seed=i, metric=_both_errors)
        worst = max(worst, max(scaled for scaled, _ in errors))
        relative = max(relative, max(rel for _, rel in errors))
    return CheckResult(name, kind, worst, tol, instances, relative)


def _both_errors(analytic: np.ndarray, numeric: np.ndarray) -> Tuple[float, float]:
    return scaled_error(analytic, numeric), relative_error(analytic, numeric)


# oracles ----------------------------------------------------------------------

def dense_lxformer_delta(block: LXformer, events: NormalizedEvents, F: Tensor) -> np.ndarray:
    """O(N^2) reference: every event attends to all other events"""
    n = len(events)
    q, k, v = block.to_q(F).data, block.to_k(F).data, block.to_v(F).data
    aggregated = np.zeros((n, block.head_channels))
    for i in range(n):
        others = np.array([j for j in range(n) if j != i], dtype=np.int64)
        pe = block.pos(events.matrix[i] - events.matrix[others]).data
        scores = block.score(Tensor(q[i] - k[others] + pe)).data
        weights = np.exp(scores - scores.max(axis=0))
        weights /= weights.sum(axis=0)
        aggregated[i] = (weights * (v[others] + pe)).sum(axis=0)
    return block.out(Tensor(aggregated)).data


def dense_gxformer_delta(block: GXformer, events: NormalizedEvents, F: Tensor) -> np.ndarray:
    """Reference for r=1: every event is a center with a one-event group, so
    each event attends to all events (itself included)"""
    n = len(events)
    f_hat = np.stack([block.group_mlp(Tensor(np.concatenate([events.matrix[j], F.data[j]])[None, :])).data[0]
                      for j in range(n)])
    q_hat, v_hat = block.to_q(Tensor(f_hat)).data, block.to_v(Tensor(f_hat)).data
    k = block.to_k(F).data
    aggregated = np.zeros((n, block.head_channels))
    for i in range(n):
        pe = block.pos(events.matrix[i] - events.matrix).data
        scores = block.score(Tensor(k[i] - q_hat + pe)).data
        weights = np.exp(scores - scores.max(axis=0))
        weights /= weights.sum(axis=0)
        aggregated[i] = (weights * (v_hat + pe)).sum(axis=0)
    return block.out(Tensor(aggregated)).data


def dense_conv(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' convolution of an (H, W, Cin) image with (k*k, Cin, Cout) taps"""
    height, width, _ = image.shape
    k = int(round(np.sqrt(kernel.shape[0])))
    r = k // 2
    padded = np.pad(image, ((r, r), (r, r), (0, 0)))
    out = np.zeros((height, width, kernel.shape[2]))
    for dy in range(k):
        for dx in range(k):
            out += padded[dy:dy + height, dx:dx + width] @ kernel[dy * k + dx]
    return out


def brute_fps(points: np.ndarray, m: int, start: int) -> np.ndarray:
    selected = [start]
    min_dist = ((points - points[start]) ** 2).sum(axis=1)
    for _ in range(m - 1):
        candidates = min_dist.copy()
        candidates[selected] = -1.0
        nxt = int(np.argmax(candidates))
        selected.append(nxt)
        min_dist = np.minimum(min_dist, ((points - points[nxt]) ** 2).sum(axis=1))
    return np.array(selected)


def brute_knn_temporal(times: np.ndarray, M: int) -> np.ndarray:
    n = len(times)
    out = np.empty((n, M), dtype=np.int64)
    for i in range(n):
        others = np.array([j for j in range(n) if j != i], dtype=np.int64)
        if others.size == 0:
            out[i] = i
            continue
        ranked = others[np.lexsort((others, np.abs(times[others] - times[i])))][:M]
        out[i] = np.concatenate([ranked, np.full(M - ranked.size, ranked[0])])
    return out


def brute_group(points: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    out = np.empty((len(centers), k), dtype=np.int64)
    for g, c in enumerate(centers):
        others = np.array([j for j in range(len(points)) if j != c], dtype=np.int64)
        d = ((points[others] - points[c]) ** 2).sum(axis=1)
        ranked = np.concatenate([[c], others[np.lexsort((others, d))]])[:k]
        out[g] = np.concatenate([ranked, np.full(k - ranked.size, c)])
    return out


def _oracle_lx(rng) -> float:
    M = int(rng.integers(2, 8))
    channels = int(rng.integers(2, 6))
    block = LXformer(channels, channels, M, rng)
    events = random_events(rng, M + 1)
    F = Tensor(rng.standard_normal((M + 1, channels)))
    return float(np.max(np.abs(block.delta(events, F).data - dense_lxformer_delta(block, events, F))))


def _oracle_gx(rng) -> float:
    n = int(rng.integers(1, 17))
    channels = int(rng.integers(2, 6))
    block = GXformer(channels, channels, 1, rng)
    events = random_events(rng, n)
    F = Tensor(rng.standard_normal((n, channels)))
    return float(np.max(np.abs(block.delta(events, F).data - dense_gxformer_delta(block, events, F))))


def _oracle_sparse_conv(rng) -> float:
    height, width = int(rng.integers(2, 7)), int(rng.integers(2, 7))
    k = int(rng.choice([1, 3, 5]))
    ys, xs = np.divmod(np.arange(height * width), width)
    grid = build_sparse_grid(xs, ys, height, width)
    image = rng.standard_normal((height, width, 3))
    kernel = rng.standard_normal((k * k, 3, 2))
    features = Tensor(image[grid.sites[:, 0], grid.sites[:, 1]])
    sparse = sparse_conv(grid, features, Tensor(kernel)).data
    dense = dense_conv(image, kernel)[grid.sites[:, 0], grid.sites[:, 1]]
    return float(np.max(np.abs(sparse - dense)))


def _integer_points(rng, n: int) -> np.ndarray:
    # integer coordinates make distances exact and produce plenty of ties
    return rng.integers(0, 6, (n, 3)).astype(np.float64)


def _oracle_fps(rng) -> float:
    n = int(rng.integers(1, 65))
    points = _integer_points(rng, n)
    m = int(rng.integers(1, n + 1))
    start = int(rng.integers(0, n))
    return float(not np.array_equal(farthest_point_sampling(points, m, start=start), brute_fps(points, m, start)))


def _oracle_knn(rng) -> float:
    n = int(rng.integers(1, 65))
    times = rng.integers(0, 20, n).astype(np.float64)
    M = int(rng.integers(1, 17))
    return float(not np.array_equal(knn_temporal(times, M), brute_knn_temporal(times, M)))


def _oracle_group(rng) -> float:
    n = int(rng.integers(1, 65))
    points = _integer_points(rng, n)
    centers = rng.choice(n, int(rng.integers(1, n + 1)), replace=False)
    k = int(rng.integers(1, 12))
    return float(not np.array_equal(group_nearest(points, centers, k), brute_group(points, centers, k)))


ORACLES: Dict[str, Tuple[Callable[[np.random.Generator], float], float]] = {
    "lxformer_dense": (_oracle_lx, ORACLE_TOL),
    "gxformer_dense": (_oracle_gx, ORACLE_TOL),
    "sparse_conv_dense": (_oracle_sparse_conv, ORACLE_TOL),
    "fps_exhaustive": (_oracle_fps, 0.0),
    "knn_temporal_exhaustive": (_oracle_knn, 0.0),
    "group_exhaustive": (_oracle_group, 0.0),
}


def run_suite(fault: Optional[str] = None, instances: int = 10, oracle_instances: int = 100, seed: int = 0,
              only: Optional[Sequence[str]] = None) -> List[CheckResult]:
    """Every gradient and oracle check; fault corrupts one backward rule for the whole run"""
    if fault is not None and fault not in BACKWARD_RULES:
        raise ValueError(f"unknown backward rule {fault!r}")
    wanted = set(only) if only else None
    results = []
    with precision("float64"):
        if fault is not None:
            logger.warning("injecting a fault into the %s backward rule", fault)
        context = inject_fault(fault) if fault is not None else nullcontext()
        with context:
            for stream, (name, build) in enumerate(PRIMITIVES.items()):
                if wanted is None or name in wanted:
                    results.append(_run_gradient_suite(name, "primitive", build, PRIMITIVE_TOL, instances, seed,
                                                       stream, None))
            for stream, (name, build) in enumerate(BLOCKS.items(), start=100):
                if wanted is None or name in wanted:
                    results.append(_run_gradient_suite(name, "block", build, BLOCK_TOL, instances, seed, stream,
                                                       BLOCK_MAX_COORDS))
            if wanted is None or "backbone" in wanted:
                results.append(_run_gradient_suite("backbone", "end-to-end", _build_backbone, BLOCK_TOL, 1, seed,
                                                   200, None))
        for stream, (name, (oracle, tol)) in enumerate(ORACLES.items(), start=300):
            if wanted is None or name in wanted:
                worst = max(oracle(rng_for(seed, stream, i)) for i in range(oracle_instances))
                results.append(CheckResult(name, "oracle", worst, tol, oracle_instances))
    for result in results:
        logger.debug(result.to_line())
    return results


def verify(results: Sequence[CheckResult]):
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise VerificationFailed(failed)
