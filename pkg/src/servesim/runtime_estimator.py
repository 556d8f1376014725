"""Per-operator runtime regressors, batch feature transforms and lookup tables.

Every regressor works in log space: features are mapped through
``log2(1 + x)`` and runtimes through ``log``. Predictions are therefore
strictly positive, and power laws become straight lines.

Two regressor families sit behind :class:`Regressor`:

``interp`` (default)
    piecewise-linear interpolation over the profiled points. 1-D uses
    ``numpy.interp`` with linear end extrapolation, full 2-D grids use
    ``RegularGridInterpolator``, scattered 2-D data a Delaunay
    ``LinearNDInterpolator`` with nearest-neighbour fill.
``forest``
    ``sklearn`` random forest (``n_estimators=64``, unbounded depth,
    ``min_samples_leaf=1``, bootstrap, fixed ``random_state``).

Serialized estimator layout (JSON, ``format == "servesim-estimator"``)::

    {"format": ..., "version": 1, "config": {...},
     "ops": [{"op_name", "tp_degree", "features", "points", "runtimes",
              "bbox_lo", "bbox_hi", "heldout_mape", "n_points"}, ...],
     "tables": [{"op_name", "tp_degree", "features", "z0", "step",
                 "shape", "log_values"}, ...]}

Loading refits the regressors from the stored points (deterministic, seeded).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .model_spec import ModelSpec, OpClass, OperatorDescriptor, ParallelismConfig, kv_bytes_per_token_per_device
from .profiler import FEATURE_SCHEMA, ProfileRecord, triage

FORMAT = "servesim-estimator"
FORMAT_VERSION = 1


class EstimatorError(ValueError):
    pass


def _tx(x):
    return np.log2(1.0 + np.asarray(x, dtype=float))


@dataclass(frozen=True)
class EstimatorConfig:
    regressor: str = "interp"
    n_estimators: int = 64
    max_depth: int | None = None
    min_samples_leaf: int = 1
    seed: int = 0
    min_points: int = 4
    holdout_fraction: float = 0.2
    extrapolation_margin: float = 0.10
    table_points_per_octave: int = 8


class Regressor(Protocol):
    def fit(self, Z: np.ndarray, y: np.ndarray) -> "Regressor": ...

    def predict(self, Z: np.ndarray) -> np.ndarray: ...


class InterpRegressor:
    """Piecewise-linear interpolation in (log feature, log runtime) space."""

    def fit(self, Z, y):
        Z = np.asarray(Z, float)
        y = np.asarray(y, float)
        self.ndim = Z.shape[1]
        if self.ndim == 1:
            xs, inv = np.unique(Z[:, 0], return_inverse=True)
            ys = np.bincount(inv, weights=y) / np.bincount(inv)
            if len(xs) < 2:
                raise EstimatorError("interpolation needs at least two distinct points")
            self._x, self._y = xs, ys
        elif self.ndim == 2:
            from scipy.interpolate import (
                LinearNDInterpolator,
                NearestNDInterpolator,
                RegularGridInterpolator,
            )

            a0, a1 = np.unique(Z[:, 0]), np.unique(Z[:, 1])
            if len(a0) * len(a1) == len(Z) and len(a0) > 1 and len(a1) > 1:
                values = np.full((len(a0), len(a1)), np.nan)
                values[np.searchsorted(a0, Z[:, 0]), np.searchsorted(a1, Z[:, 1])] = y
                self._grid = RegularGridInterpolator(
                    (a0, a1), values, bounds_error=False, fill_value=None
                )
                self._scattered = None
            else:
                self._grid = None
                self._scattered = LinearNDInterpolator(Z, y)
                self._nearest = NearestNDInterpolator(Z, y)
        else:
            raise EstimatorError(f"interp regressor supports 1 or 2 features, got {self.ndim}")
        return self

    def predict(self, Z):
        Z = np.asarray(Z, float)
        if self.ndim == 1:
            x, xs, ys = Z[:, 0], self._x, self._y
            out = np.interp(x, xs, ys)
            lo_slope = (ys[1] - ys[0]) / (xs[1] - xs[0])
            hi_slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
            out = np.where(x < xs[0], ys[0] + (x - xs[0]) * lo_slope, out)
            return np.where(x > xs[-1], ys[-1] + (x - xs[-1]) * hi_slope, out)
        if self._grid is not None:
            return self._grid(Z)
        out = self._scattered(Z)
        missing = np.isnan(out)
        if missing.any():
            out[missing] = self._nearest(Z[missing])
        return out


class ForestRegressor:
    def __init__(self, config: EstimatorConfig):
        from sklearn.ensemble import RandomForestRegressor

        self._rf = RandomForestRegressor(
            n_estimators=config.n_estimators,
            max_depth=config.max_depth,
            min_samples_leaf=config.min_samples_leaf,
            random_state=config.seed,
            n_jobs=1,
        )

    def fit(self, Z, y):
        self._rf.fit(np.asarray(Z, float), np.asarray(y, float))
        return self

    def predict(self, Z):
        return self._rf.predict(np.asarray(Z, float))


def make_regressor(config: EstimatorConfig) -> Regressor:
    if config.regressor == "interp":
        return InterpRegressor()
    if config.regressor == "forest":
        return ForestRegressor(config)
    raise EstimatorError(f"unknown regressor {config.regressor!r} (interp, forest)")


@dataclass
class OpModel:
    op_name: str
    tp_degree: int
    features: tuple[str, ...]
    points: np.ndarray
    runtimes: np.ndarray
    bbox_lo: np.ndarray
    bbox_hi: np.ndarray
    heldout_mape: float
    regressor: Regressor = field(repr=False)

    @property
    def n_points(self) -> int:
        return len(self.runtimes)


def _allowed_range(lo, hi, margin):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    return lo / (1.0 + margin), hi * (1.0 + margin)


class EstimatorModel:
    """Trained per-(operator, tp_degree) runtime predictors."""

    def __init__(self, ops: dict[tuple[str, int], OpModel], config: EstimatorConfig):
        self.ops = ops
        self.config = config

    def keys(self) -> list[tuple[str, int]]:
        return sorted(self.ops)

    def _get(self, op_name: str, tp_degree: int) -> OpModel:
        try:
            return self.ops[(op_name, int(tp_degree))]
        except KeyError:
            have = ", ".join(f"{n}@tp{t}" for n, t in self.keys())
            raise EstimatorError(
                f"no trained model for {op_name} at tp_degree={tp_degree} (have: {have})"
            ) from None

    def predict_many(self, op_name: str, tp_degree: int, X) -> np.ndarray:
        m = self._get(op_name, tp_degree)
        X = np.atleast_2d(np.asarray(X, float))
        lo, hi = _allowed_range(m.bbox_lo, m.bbox_hi, self.config.extrapolation_margin)
        bad = (X < lo - 1e-9) | (X > hi + 1e-9)
        if bad.any():
            row, col = np.argwhere(bad)[0]
            raise EstimatorError(
                f"{op_name}@tp{tp_degree}: {m.features[col]}={X[row, col]:g} outside "
                f"training range [{m.bbox_lo[col]:g}, {m.bbox_hi[col]:g}] "
                f"+{self.config.extrapolation_margin:.0%} margin"
            )
        return np.exp(m.regressor.predict(_tx(X)))

    def predict(self, op_name: str, tp_degree: int, features: Mapping[str, float]) -> float:
        m = self._get(op_name, tp_degree)
        try:
            row = [features[f] for f in m.features]
        except KeyError as exc:
            raise EstimatorError(f"{op_name}: missing feature {exc}") from None
        return float(self.predict_many(op_name, tp_degree, [row])[0])

    def report(self) -> list[dict]:
        return [
            {
                "op_name": m.op_name,
                "tp_degree": m.tp_degree,
                "n_points": m.n_points,
                "heldout_mape": m.heldout_mape,
                "regressor": self.config.regressor,
            }
            for _, m in sorted(self.ops.items())
        ]

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "config": asdict(self.config),
            "ops": [
                {
                    "op_name": m.op_name,
                    "tp_degree": m.tp_degree,
                    "features": list(m.features),
                    "points": m.points.tolist(),
                    "runtimes": m.runtimes.tolist(),
                    "bbox_lo": m.bbox_lo.tolist(),
                    "bbox_hi": m.bbox_hi.tolist(),
                    "heldout_mape": m.heldout_mape,
                    "n_points": m.n_points,
                }
                for _, m in sorted(self.ops.items())
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EstimatorModel":
        _check_format(doc)
        config = EstimatorConfig(**doc["config"])
        ops = {}
        for entry in doc["ops"]:
            X = np.asarray(entry["points"], float)
            y = np.asarray(entry["runtimes"], float)
            reg = make_regressor(config).fit(_tx(X), np.log(y))
            m = OpModel(
                op_name=entry["op_name"],
                tp_degree=int(entry["tp_degree"]),
                features=tuple(entry["features"]),
                points=X,
                runtimes=y,
                bbox_lo=np.asarray(entry["bbox_lo"], float),
                bbox_hi=np.asarray(entry["bbox_hi"], float),
                heldout_mape=float(entry["heldout_mape"]),
                regressor=reg,
            )
            ops[(m.op_name, m.tp_degree)] = m
        return cls(ops, config)


def _check_format(doc: dict) -> None:
    if doc.get("format") != FORMAT:
        raise EstimatorError(f"not a {FORMAT} file")
    if doc.get("version") != FORMAT_VERSION:
        raise EstimatorError(f"unsupported estimator version {doc.get('version')!r}")


def _heldout_mape(Z, logy, config: EstimatorConfig) -> float:
    n = len(logy)
    n_test = int(round(n * config.holdout_fraction))
    if n_test < 1 or n - n_test < config.min_points:
        return float("nan")
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(n)
    test, train = perm[:n_test], perm[n_test:]
    try:
        reg = make_regressor(config).fit(Z[train], logy[train])
        pred = reg.predict(Z[test])
    except (EstimatorError, ValueError):
        return float("nan")
    truth = np.exp(logy[test])
    return float(np.mean(np.abs(np.exp(pred) - truth) / truth))


def train(records: Iterable[ProfileRecord], config: EstimatorConfig = EstimatorConfig()) -> EstimatorModel:
    """Fit one regressor per (op_name, tp_degree) group of profile records."""
    groups: dict[tuple[str, int], list[ProfileRecord]] = {}
    for rec in records:
        key = (rec.op_name, int(rec.features.get("tp_degree", 1)))
        groups.setdefault(key, []).append(rec)
    if not groups:
        raise EstimatorError("no profile records to train on")

    ops = {}
    for key in sorted(groups):
        recs = groups[key]
        op_name, tp = key
        feats = FEATURE_SCHEMA[op_name]
        if len(recs) < config.min_points:
            raise EstimatorError(
                f"{op_name}@tp{tp}: {len(recs)} points, need at least {config.min_points}"
            )
        X = np.array([[r.features[f] for f in feats] for r in recs], float)
        y = np.array([r.runtime for r in recs], float)
        Z, logy = _tx(X), np.log(y)
        reg = make_regressor(config).fit(Z, logy)
        ops[key] = OpModel(
            op_name=op_name,
            tp_degree=tp,
            features=feats,
            points=X,
            runtimes=y,
            bbox_lo=X.min(axis=0),
            bbox_hi=X.max(axis=0),
            heldout_mape=_heldout_mape(Z, logy, config),
            regressor=reg,
        )
    return EstimatorModel(ops, config)


# -- batch feature transforms -------------------------------------------------


@dataclass
class BatchComposition:
    """Token makeup of one iteration.

    ``prefill_contexts[i]`` is the number of tokens of prefill ``i`` already
    in the KV-cache from earlier chunks (0 for a fresh prompt).
    """

    prefill_lengths: list[int] = field(default_factory=list)
    decode_context_lengths: list[int] = field(default_factory=list)
    prefill_contexts: list[int] | None = None

    def __post_init__(self):
        if self.prefill_contexts is None:
            self.prefill_contexts = [0] * len(self.prefill_lengths)
        if len(self.prefill_contexts) != len(self.prefill_lengths):
            raise ValueError("prefill_contexts must align with prefill_lengths")
        if any(v < 0 for v in self.prefill_lengths) or any(v < 0 for v in self.decode_context_lengths):
            raise ValueError("batch lengths must be non-negative")

    @property
    def num_decode_tokens(self) -> int:
        return len(self.decode_context_lengths)

    @property
    def num_tokens(self) -> int:
        return sum(self.prefill_lengths) + self.num_decode_tokens


def equivalent_prefill_length(prefill_lengths: Sequence[int]) -> int:
    """Length of the single prefill whose attention cost matches the batch."""
    if not prefill_lengths:
        raise ValueError("equivalent_prefill_length needs at least one prefill")
    return int(round(math.sqrt(sum(p * p for p in prefill_lengths))))


def decode_features(batch: BatchComposition, spec: ModelSpec, par: ParallelismConfig) -> dict[str, int]:
    kv_per_token = kv_bytes_per_token_per_device(spec, par)
    return {
        "kv_read_bytes": sum(batch.decode_context_lengths) * kv_per_token,
        "num_tokens": batch.num_decode_tokens,
    }


def _kv_bytes_per_token_layer(op: OperatorDescriptor) -> int:
    d = op.dims
    return 2 * d["kv_heads"] * d["head_dim"] * op.elem_bytes


def op_batch_features(op: OperatorDescriptor, batch: BatchComposition) -> dict[str, float] | None:
    """Regression features of ``op`` for one iteration, or None if it is idle."""
    name = op.op_name
    cls = triage(op)
    n = batch.num_tokens
    if cls is OpClass.TOKEN:
        return {"num_tokens": n} if n else None
    if cls is OpClass.COMMUNICATION:
        return {"payload_bytes": n * op.dims["width"] * op.elem_bytes} if n else None
    if name == "attn_prefill":
        if not batch.prefill_lengths:
            return None
        eq = equivalent_prefill_length(batch.prefill_lengths)
        # token-weighted cached context keeps eq * context == sum(p_i * c_i)
        ctx = sum(p * c for p, c in zip(batch.prefill_lengths, batch.prefill_contexts)) / eq
        return {"num_tokens": eq, "kv_read_bytes": ctx * _kv_bytes_per_token_layer(op)}
    if name == "attn_decode":
        if not batch.decode_context_lengths:
            return None
        return {"kv_read_bytes": sum(batch.decode_context_lengths) * _kv_bytes_per_token_layer(op)}
    raise EstimatorError(f"no batch feature mapping for {name}")


def predict_batch(model, ops: Sequence[OperatorDescriptor], batch: BatchComposition, dev=None) -> float:
    """Iteration time of one pipeline stage for ``batch``.

    ``model`` is an :class:`EstimatorModel` or a :class:`LookupTable`.
    ``dev`` is accepted for interface symmetry; device effects are already
    folded into the trained predictors.
    """
    total = 0.0
    for op in ops:
        feats = op_batch_features(op, batch)
        if feats is None:
            continue
        tp = 1 if op.op_name == "send_recv" else op.tp_degree
        try:
            t = model.predict(op.op_name, tp, feats)
        except EstimatorError as exc:
            raise EstimatorError(
                f"{exc} [batch: {len(batch.prefill_lengths)} prefills "
                f"({sum(batch.prefill_lengths)} tokens), {batch.num_decode_tokens} decodes]"
            ) from None
        total += t * op.invocations
    if total <= 0:
        raise EstimatorError("empty batch has no runtime")
    return total


# -- lookup tables ------------------------------------------------------------


@dataclass
class _Table:
    op_name: str
    tp_degree: int
    features: tuple[str, ...]
    z0: list[float]
    step: list[float]
    shape: list[int]
    log_values: list  # nested lists, ndim == len(features)

    def lookup(self, xs: Sequence[float]) -> float:
        idx = []
        frac = []
        for k, x in enumerate(xs):
            z = math.log2(1.0 + x)
            pos = (z - self.z0[k]) / self.step[k]
            last = self.shape[k] - 1
            if pos < -1e-9 or pos > last + 1e-9:
                raise EstimatorError(
                    f"{self.op_name}@tp{self.tp_degree}: {self.features[k]}={x:g} outside lookup table"
                )
            i = min(max(int(pos), 0), last - 1) if last > 0 else 0
            idx.append(i)
            frac.append(min(max(pos - i, 0.0), 1.0) if last > 0 else 0.0)
        v = self.log_values
        if len(idx) == 1:
            i, f = idx[0], frac[0]
            lv = v[i] if f == 0.0 else v[i] + (v[i + 1] - v[i]) * f
        else:
            (i, j), (f, g) = idx, frac
            i1 = min(i + 1, self.shape[0] - 1)
            j1 = min(j + 1, self.shape[1] - 1)
            a = v[i][j] + (v[i][j1] - v[i][j]) * g
            b = v[i1][j] + (v[i1][j1] - v[i1][j]) * g
            lv = a + (b - a) * f
        return math.exp(lv)


class LookupTable:
    """Dense tables of a trained model, interpolated linearly in log space."""

    def __init__(self, tables: dict[tuple[str, int], _Table]):
        self.tables = tables

    def keys(self) -> list[tuple[str, int]]:
        return sorted(self.tables)

    def predict(self, op_name: str, tp_degree: int, features: Mapping[str, float]) -> float:
        try:
            t = self.tables[(op_name, int(tp_degree))]
        except KeyError:
            raise EstimatorError(f"no lookup table for {op_name} at tp_degree={tp_degree}") from None
        return t.lookup([features[f] for f in t.features])

    def to_dict(self) -> list[dict]:
        return [asdict(t) for _, t in sorted(self.tables.items())]

    @classmethod
    def from_dict(cls, entries: list[dict]) -> "LookupTable":
        tables = {}
        for e in entries:
            e = dict(e)
            e["features"] = tuple(e["features"])
            t = _Table(**e)
            tables[(t.op_name, t.tp_degree)] = t
        return cls(tables)


def table_axes(model: EstimatorModel, key: tuple[str, int], points_per_octave: int | None = None) -> list[np.ndarray]:
    """Uniform axes in log2(1+x) space spanning the allowed query range."""
    m = model.ops[key]
    ppo = points_per_octave or model.config.table_points_per_octave
    lo, hi = _allowed_range(m.bbox_lo, m.bbox_hi, model.config.extrapolation_margin)
    axes = []
    for a, b in zip(_tx(lo), _tx(hi)):
        n = max(2, int(math.ceil((b - a) * ppo)) + 1)
        axes.append(np.linspace(a, b, n))
    return axes


def build_lookup_table(model: EstimatorModel, grid: int | None = None) -> LookupTable:
    """Tabulate ``model`` on a dense log-spaced grid (``grid`` points/octave)."""
    tables = {}
    for key in model.keys():
        m = model.ops[key]
        axes = table_axes(model, key, grid)
        mesh = np.meshgrid(*axes, indexing="ij")
        Z = np.stack([g.ravel() for g in mesh], axis=1)
        logv = m.regressor.predict(Z).reshape([len(a) for a in axes])
        tables[key] = _Table(
            op_name=m.op_name,
            tp_degree=m.tp_degree,
            features=m.features,
            z0=[float(a[0]) for a in axes],
            step=[float(a[1] - a[0]) for a in axes],
            shape=[len(a) for a in axes],
            log_values=logv.tolist(),
        )
    return LookupTable(tables)


def save_estimator(path: str | Path, model: EstimatorModel, table: LookupTable | None = None) -> None:
    doc = model.to_dict()
    if table is not None:
        doc["tables"] = table.to_dict()
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_estimator(path: str | Path) -> tuple[EstimatorModel, LookupTable | None]:
    doc = json.loads(Path(path).read_text())
    model = EstimatorModel.from_dict(doc)
    table = LookupTable.from_dict(doc["tables"]) if "tables" in doc else None
    return model, table
