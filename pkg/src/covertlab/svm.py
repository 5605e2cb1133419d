"""Soft-margin RBF support vector classifier trained with SMO.

The dual is solved with pairwise updates and second-order working-set
selection (maximal violating ``i``, then the ``j`` giving the largest
objective decrease), on a precomputed kernel matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import CovertLabError, Label, RecordSet

log = logging.getLogger(__name__)

TAU = 1e-12


class ModelFormatError(CovertLabError, ValueError):
    """A model file could not be parsed."""


@dataclass(frozen=True)
class KernelParams:
    gamma: float | None = None  # None: 1 / (n_features * var(scaled X))
    box_constraint: float = 1.0
    tolerance: float = 1e-3
    max_passes: int = 200_000

    def __post_init__(self) -> None:
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if not self.box_constraint > 0:
            raise ValueError("box_constraint must be > 0")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")
        if self.max_passes < 1:
            raise ValueError("max_passes must be >= 1")


@dataclass(frozen=True, eq=False)
class FeatureScaling:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "FeatureScaling":
        std = X.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(X.mean(axis=0), std)

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std


def default_gamma(X_scaled: np.ndarray) -> float:
    var = float(X_scaled.var())
    return 1.0 / (X_scaled.shape[1] * var) if var > 0 else 1.0


def rbf_kernel(a, b, gamma: float) -> float:
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.exp(-gamma * np.dot(d, d)))


def rbf_matrix(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * (A @ B.T)
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-gamma * sq)


@dataclass(frozen=True, eq=False)
class TrainedModel:
    """Support vectors are kept in raw feature units; ``scaling`` is applied at prediction."""

    support_vectors: np.ndarray
    multipliers: np.ndarray
    labels: np.ndarray
    bias: float
    params: KernelParams
    scaling: FeatureScaling
    support_index: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self) -> None:
        n = len(self.multipliers)
        if not (len(self.support_vectors) == n == len(self.labels)):
            raise ValueError("support vectors, multipliers and labels differ in length")
        if n and not np.all(self.multipliers > 0):
            raise ValueError("multipliers must be strictly positive")
        if self.params.gamma is None:
            raise ValueError("model params must carry a resolved gamma")

    @property
    def n_support(self) -> int:
        return len(self.multipliers)

    def decision_function(self, X, chunk: int = 4096) -> np.ndarray:
        if self.n_support == 0:
            raise ValueError("model has no support vectors")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        sv = self.scaling.apply(self.support_vectors)
        coef = self.multipliers * self.labels
        out = np.empty(X.shape[0])
        for s in range(0, X.shape[0], chunk):
            Xs = self.scaling.apply(X[s : s + chunk])
            out[s : s + chunk] = rbf_matrix(Xs, sv, self.params.gamma) @ coef + self.bias
        return out

    def predict_labels(self, X) -> np.ndarray:
        """+1 (covert) where the decision value is positive, else -1."""
        return np.where(self.decision_function(X) > 0, 1, -1)


def _solve_dual(K: np.ndarray, y: np.ndarray, C: float, tol: float, max_iter: int) -> tuple[np.ndarray, float, int]:
    n = y.size
    a = np.zeros(n)
    G = -np.ones(n)
    diag = np.diag(K).copy()
    pos = y > 0
    it = 0
    for it in range(1, max_iter + 1):
        yG = -y * G
        at_upper = a >= C
        at_lower = a <= 0
        up = np.where(pos, ~at_upper, ~at_lower)
        low = np.where(pos, ~at_lower, ~at_upper)
        masked = np.where(up, yG, -np.inf)
        i = int(np.argmax(masked))
        gmax = masked[i]
        gmin = np.min(np.where(low, yG, np.inf))
        if gmax - gmin < tol:
            break
        Ki = K[i]
        cand = low & (yG < gmax)
        b = gmax - yG
        quad = diag[i] + diag - 2.0 * Ki
        quad = np.where(quad > 0, quad, TAU)
        obj = np.where(cand, -(b * b) / quad, np.inf)
        j = int(np.argmin(obj))
        Kj = K[j]

        ai, aj = a[i], a[j]
        if y[i] != y[j]:
            q = diag[i] + diag[j] - 2.0 * Ki[j]
            q = q if q > 0 else TAU
            delta = (-G[i] - G[j]) / q
            diff = ai - aj
            ai += delta
            aj += delta
            if diff > 0:
                if aj < 0:
                    aj, ai = 0.0, diff
            elif ai < 0:
                ai, aj = 0.0, -diff
            if diff > 0:
                if ai > C:
                    ai, aj = C, C - diff
            elif aj > C:
                aj, ai = C, C + diff
        else:
            q = diag[i] + diag[j] - 2.0 * Ki[j]
            q = q if q > 0 else TAU
            delta = (G[i] - G[j]) / q
            total = ai + aj
            ai -= delta
            aj += delta
            if total > C:
                if ai > C:
                    ai, aj = C, total - C
            elif aj < 0:
                aj, ai = 0.0, total
            if total > C:
                if aj > C:
                    aj, ai = C, total - C
            elif ai < 0:
                ai, aj = 0.0, total

        dai, daj = ai - a[i], aj - a[j]
        a[i], a[j] = ai, aj
        G += y * (y[i] * dai * Ki + y[j] * daj * Kj)
    else:
        log.warning("SMO hit max_passes=%d before reaching tolerance %g", max_iter, tol)

    yG = y * G
    free = (a > 0) & (a < C)
    if np.any(free):
        rho = float(yG[free].mean())
    else:
        at_upper = a >= C
        ub_mask = (at_upper & ~pos) | (~at_upper & pos)
        lb_mask = ~ub_mask
        ub = yG[ub_mask].min() if ub_mask.any() else np.inf
        lb = yG[lb_mask].max() if lb_mask.any() else -np.inf
        rho = float((ub + lb) / 2)
    return a, rho, it


def _check_training_data(records: RecordSet) -> tuple[np.ndarray, np.ndarray]:
    X, y = records.features, records.labels.astype(np.float64)
    if len(records) == 0 or records.n_covert == 0 or records.n_overt == 0:
        raise ValueError("training data must contain both classes")
    if not np.all(np.isfinite(X)):
        raise ValueError("training features must be finite")
    return X, y


def resolve_params(records: RecordSet, params: KernelParams) -> tuple[KernelParams, FeatureScaling]:
    """Fix feature scaling and gamma from a training set."""
    X, _ = _check_training_data(records)
    scaling = FeatureScaling.fit(X)
    if params.gamma is None:
        params = replace(params, gamma=default_gamma(scaling.apply(X)))
    return params, scaling


def train(
    records: RecordSet,
    params: KernelParams | None = None,
    seed: int = 0,
    scaling: FeatureScaling | None = None,
) -> TrainedModel:
    """Fit an RBF SVM.

    ``seed`` fixes the order the solver sees the records in, which decides
    ties during working-set selection. Passing ``scaling`` (and a resolved
    ``params.gamma``) pins the feature space, as distributed training does.
    """
    params = params or KernelParams()
    X, y = _check_training_data(records)
    if scaling is None:
        scaling = FeatureScaling.fit(X)
    if params.gamma is None:
        params = replace(params, gamma=default_gamma(scaling.apply(X)))
    order = np.random.default_rng(seed).permutation(len(y))
    Xs = scaling.apply(X[order])
    K = rbf_matrix(Xs, Xs, params.gamma)
    a_perm, rho, iters = _solve_dual(K, y[order], params.box_constraint, params.tolerance, params.max_passes)
    log.debug("SMO converged in %d iterations on %d points", iters, len(y))
    a = np.empty_like(a_perm)
    a[order] = a_perm
    sv = np.flatnonzero(a > 0)
    return TrainedModel(
        support_vectors=X[sv].copy(),
        multipliers=a[sv],
        labels=y[sv].astype(np.int64),
        bias=-rho,
        params=params,
        scaling=scaling,
        support_index=sv,
    )


def predict(model: TrainedModel, x) -> tuple[Label, float]:
    f = float(model.decision_function(np.asarray(x, dtype=np.float64).reshape(1, -1))[0])
    return Label.from_sign(f), f


def full_multipliers(model: TrainedModel, n: int) -> np.ndarray:
    a = np.zeros(n)
    a[model.support_index] = model.multipliers
    return a


def kkt_violations(model: TrainedModel, records: RecordSet) -> np.ndarray:
    """Per-point violation of the soft-margin KKT conditions (0 when satisfied).

    a = 0 needs y f >= 1, 0 < a < C needs y f = 1, a = C needs y f <= 1.
    """
    a = full_multipliers(model, len(records))
    C = model.params.box_constraint
    margin = records.labels * model.decision_function(records.features) - 1.0
    viol = np.zeros(len(records))
    zero = a <= 0
    bound = a >= C
    free = ~zero & ~bound
    viol[zero] = np.maximum(-margin[zero], 0.0)
    viol[bound] = np.maximum(margin[bound], 0.0)
    viol[free] = np.abs(margin[free])
    return viol


# --- model files ----------------------------------------------------------------

MODEL_MAGIC = "# covertlab svm model"


def _floats(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def model_header(model: TrainedModel) -> list[str]:
    p = model.params
    return [
        MODEL_MAGIC,
        "format=1",
        "kernel=rbf",
        f"gamma={float(p.gamma)!r}",
        f"box_constraint={float(p.box_constraint)!r}",
        f"tolerance={float(p.tolerance)!r}",
        f"max_passes={int(p.max_passes)}",
        f"bias={float(model.bias)!r}",
        f"scale_mean={_floats(model.scaling.mean)}",
        f"scale_std={_floats(model.scaling.std)}",
        f"n_support={model.n_support}",
    ]


def save_model(model: TrainedModel, path: str | Path) -> None:
    """Text format: ``key=value`` header, then ``alpha,label,feature1,feature2,feature3`` per SV."""
    lines = model_header(model)
    provenance = getattr(model, "provenance", None)
    if provenance is not None:
        lines.insert(-1, f"worker_biases={_floats(model.worker_biases)}")
        lines.append("alpha,label,feature1,feature2,feature3,worker")
    else:
        lines.append("alpha,label,feature1,feature2,feature3")
    for k in range(model.n_support):
        row = f"{float(model.multipliers[k])!r},{int(model.labels[k])},{_floats(model.support_vectors[k])}"
        if provenance is not None:
            row += f",{int(provenance[k])}"
        lines.append(row)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_model(path: str | Path) -> tuple[dict[str, str], np.ndarray, list[str]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: line 1: not a covertlab model file")
    header: dict[str, str] = {}
    k = 1
    while k < len(lines) and "=" in lines[k]:
        key, value = lines[k].split("=", 1)
        header[key] = value
        k += 1
    if k >= len(lines) or not lines[k].startswith("alpha,label,"):
        raise ModelFormatError(f"{path}: line {k + 1}: missing support-vector column header")
    columns = lines[k].split(",")
    rows = []
    for lineno, line in enumerate(lines[k + 1 :], start=k + 2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != len(columns):
            raise ModelFormatError(f"{path}: line {lineno}: expected {len(columns)} fields, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError as exc:
            raise ModelFormatError(f"{path}: line {lineno}: {exc}") from None
    table = np.array(rows, dtype=np.float64).reshape(-1, len(columns))
    return header, table, columns


def _header_float(header: dict[str, str], key: str, path) -> float:
    try:
        return float(header[key])
    except KeyError:
        raise ModelFormatError(f"{path}: missing header key {key!r}") from None
    except ValueError:
        raise ModelFormatError(f"{path}: bad value for {key!r}: {header[key]!r}") from None


def _header_vector(header: dict[str, str], key: str, path) -> np.ndarray:
    try:
        return np.array([float(v) for v in header[key].split(",")])
    except KeyError:
        raise ModelFormatError(f"{path}: missing header key {key!r}") from None
    except ValueError:
        raise ModelFormatError(f"{path}: bad value for {key!r}") from None


def load_model(path: str | Path) -> TrainedModel:
    header, table, columns = parse_model(path)
    if header.get("kernel") != "rbf":
        raise ModelFormatError(f"{path}: unsupported kernel {header.get('kernel')!r}")
    n = int(_header_float(header, "n_support", path))
    if table.shape[0] != n:
        raise ModelFormatError(f"{path}: header says {n} support vectors, found {table.shape[0]}")
    try:
        params = KernelParams(
            gamma=_header_float(header, "gamma", path),
            box_constraint=_header_float(header, "box_constraint", path),
            tolerance=_header_float(header, "tolerance", path),
            max_passes=int(_header_float(header, "max_passes", path)),
        )
        kwargs = dict(
            support_vectors=table[:, 2:5].copy(),
            multipliers=table[:, 0].copy(),
            labels=table[:, 1].astype(np.int64),
            bias=_header_float(header, "bias", path),
            params=params,
            scaling=FeatureScaling(_header_vector(header, "scale_mean", path), _header_vector(header, "scale_std", path)),
        )
        if "worker" in columns:
            from .distributed import MergedModel

            return MergedModel(
                **kwargs,
                provenance=table[:, 5].astype(np.int64),
                worker_biases=_header_vector(header, "worker_biases", path),
            )
        return TrainedModel(**kwargs)
    except ValueError as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"{path}: {exc}") from None
