"""Kronecker-factored curvature: per-layer (Delta, X) second moments and
damped inverse-Hessian-vector products.

Each tracked layer's curvature block is approximated as
E[delta delta^T] (x) E[x x^T], with the Q/K/V projections of one attention
layer treated as a single block so their gradient cross-correlations enter
Delta. Inverses go through eigendecompositions; damping is applied exactly
in the joint eigenbasis as 1 / (S_Delta_i * S_X_j + lambda).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, SingularFactorError
from .model import LayerTap, ParamSet, TrackedLayer, backward, forward, tracked_layers

EIG_FLOOR_REL = 1e-12
DEFAULT_DAMPING = 1e-3


@dataclass
class KroneckerFactor:
    """Running second moments for one layer; means are exposed as properties.

    Raw sums are stored so that accumulation order cannot perturb the mean:
    accumulating the same tap twice yields bitwise-identical Delta and X.
    """

    layer: str
    kind: str
    d_out: int
    d_in: int
    delta_sum: np.ndarray  # (d_out, d_out) running sum of delta delta^T
    x_sum: np.ndarray  # (d_in, d_in) running sum of x x^T
    sample_count: int = 0

    @property
    def Delta(self) -> np.ndarray:
        if self.sample_count == 0:
            raise DataError(f"factor {self.layer} has no accumulated samples")
        return self.delta_sum / self.sample_count

    @property
    def X(self) -> np.ndarray:
        if self.sample_count == 0:
            raise DataError(f"factor {self.layer} has no accumulated samples")
        return self.x_sum / self.sample_count


def zero_factor(tl: TrackedLayer) -> KroneckerFactor:
    return KroneckerFactor(
        layer=tl.name,
        kind=tl.kind,
        d_out=tl.d_out,
        d_in=tl.d_in,
        delta_sum=np.zeros((tl.d_out, tl.d_out)),
        x_sum=np.zeros((tl.d_in, tl.d_in)),
    )


def accumulate(factor: KroneckerFactor, tap: LayerTap) -> KroneckerFactor:
    """Fold one tap into the factor; every token is one (x, delta) sample."""
    if tap.kind != factor.kind:
        raise DataError(f"tap kind {tap.kind!r} does not match factor {factor.kind!r}")
    if tap.delta.shape[1] != factor.d_out or tap.x.shape[1] != factor.d_in:
        raise DataError(
            f"tap dims ({tap.delta.shape[1]}, {tap.x.shape[1]}) do not match "
            f"factor ({factor.d_out}, {factor.d_in})"
        )
    return KroneckerFactor(
        layer=factor.layer,
        kind=factor.kind,
        d_out=factor.d_out,
        d_in=factor.d_in,
        delta_sum=factor.delta_sum + tap.delta.T @ tap.delta,
        x_sum=factor.x_sum + tap.x.T @ tap.x,
        sample_count=factor.sample_count + tap.x.shape[0],
    )


def joint_qkv_pack(tap_q: LayerTap, tap_k: LayerTap, tap_v: LayerTap) -> LayerTap:
    """Stack per-projection deltas over the shared input into one joint tap."""
    if tap_q.x.shape != tap_k.x.shape or tap_q.x.shape != tap_v.x.shape:
        raise DataError("q/k/v taps disagree on input shape")
    if not (np.array_equal(tap_q.x, tap_k.x) and np.array_equal(tap_q.x, tap_v.x)):
        raise DataError("q/k/v taps must share the same input activations")
    return LayerTap(
        layer=tap_q.layer,
        kind="qkv-joint",
        x=tap_q.x,
        delta=np.concatenate([tap_q.delta, tap_k.delta, tap_v.delta], axis=1),
    )


def collect_factors(params: ParamSet, sequences, registry=None) -> dict[str, KroneckerFactor]:
    """Estimate factors over a sequence set (one backward pass per sequence)."""
    registry = registry if registry is not None else tracked_layers(params.config)
    factors = {tl.name: zero_factor(tl) for tl in registry}
    names = {(tl.layer, tl.kind): tl.name for tl in registry}
    for seq in sequences:
        _, cache = forward(params, seq)
        _, taps = backward(params, cache)
        for tap in taps:
            key = (tap.layer, tap.kind)
            if key in names:
                factors[names[key]] = accumulate(factors[names[key]], tap)
    return factors


def merge_factors(parts: list[KroneckerFactor]) -> KroneckerFactor:
    """Deterministic ordered reduction of partial factors."""
    if not parts:
        raise DataError("nothing to merge")
    out = parts[0]
    for p in parts[1:]:
        if (p.layer, p.kind, p.d_out, p.d_in) != (out.layer, out.kind, out.d_out, out.d_in):
            raise DataError("cannot merge factors for different layers")
        out = KroneckerFactor(
            layer=out.layer, kind=out.kind, d_out=out.d_out, d_in=out.d_in,
            delta_sum=out.delta_sum + p.delta_sum,
            x_sum=out.x_sum + p.x_sum,
            sample_count=out.sample_count + p.sample_count,
        )
    return out


@dataclass
class DampedFactorInverse:
    """Eigendecompositions of (Delta, X) with a damping constant."""

    layer: str
    kind: str
    evecs_delta: np.ndarray
    evals_delta: np.ndarray
    evecs_x: np.ndarray
    evals_x: np.ndarray
    damping: float

    @property
    def d_out(self) -> int:
        return self.evals_delta.shape[0]

    @property
    def d_in(self) -> int:
        return self.evals_x.shape[0]


def _floored_eigh(mat: np.ndarray):
    sym = 0.5 * (mat + mat.T)
    evals, evecs = np.linalg.eigh(sym)
    top = evals.max() if evals.size else 0.0
    if top > 0.0:
        evals = np.maximum(evals, EIG_FLOOR_REL * top)
    else:
        evals = np.maximum(evals, 0.0)
    return evals, evecs


def factor_inverse(
    delta: np.ndarray,
    x: np.ndarray,
    damping: float,
    layer: str = "",
    kind: str = "",
) -> DampedFactorInverse:
    """Eigendecompose raw (Delta, X); eigenvalues below 1e-12 of the top one
    are clamped up before damping so rank deficiency stays deterministic."""
    sd, qd = _floored_eigh(delta)
    sx, qx = _floored_eigh(x)
    return DampedFactorInverse(
        layer=layer, kind=kind,
        evecs_delta=qd, evals_delta=sd, evecs_x=qx, evals_x=sx,
        damping=float(damping),
    )


def inverse_of_factor(factor: KroneckerFactor, damping: float) -> DampedFactorInverse:
    return factor_inverse(factor.Delta, factor.X, damping, layer=factor.layer, kind=factor.kind)


def kron_ihvp(inv: DampedFactorInverse, v: np.ndarray) -> np.ndarray:
    """(Delta (x) X + lambda I)^-1 v via the matrix-shaped eigen identity.

    v is the row-major flattening of a (d_out, d_in) matrix V; the result is
    the row-major flattening of Q_D [ (Q_D^T V Q_X) / (S_D_i S_X_j + lambda) ] Q_X^T.
    At lambda=0 this is exactly vec(Delta^-1 V X^-1).
    """
    if v.shape != (inv.d_out * inv.d_in,):
        raise DataError(
            f"ihvp vector has length {v.shape}, expected {inv.d_out * inv.d_in}"
        )
    denom = inv.evals_delta[:, None] * inv.evals_x[None, :] + inv.damping
    if denom.min() <= 0.0:
        i, j = np.unravel_index(int(np.argmin(denom)), denom.shape)
        raise SingularFactorError(
            f"factor {inv.layer or '<anon>'}: eigenvalue product underflows at "
            f"(S_Delta[{i}]={inv.evals_delta[i]:.3e}) * (S_X[{j}]={inv.evals_x[j]:.3e}) "
            f"with damping {inv.damping}"
        )
    V = v.reshape(inv.d_out, inv.d_in)
    core = inv.evecs_delta.T @ V @ inv.evecs_x
    core = core / denom
    out = inv.evecs_delta @ core @ inv.evecs_x.T
    return out.ravel()


def qkv_block_inverses(factor: KroneckerFactor, damping: float) -> list[DampedFactorInverse]:
    """Per-projection inverses that ignore the Q/K/V cross-blocks of Delta."""
    if factor.kind != "qkv-joint":
        raise DataError("block inverses only apply to qkv-joint factors")
    d = factor.d_out // 3
    out = []
    for idx, nm in enumerate("qkv"):
        block = factor.Delta[idx * d : (idx + 1) * d, idx * d : (idx + 1) * d]
        out.append(factor_inverse(block, factor.X, damping,
                                  layer=f"{factor.layer}[{nm}]", kind="qkv-block"))
    return out


def qkv_blockwise_ihvp(invs: list[DampedFactorInverse], v: np.ndarray) -> np.ndarray:
    """Apply per-projection inverses to the stacked qkv gradient vector."""
    d_in = invs[0].d_in
    per = invs[0].d_out * d_in
    if v.shape != (3 * per,):
        raise DataError("stacked qkv vector has the wrong length")
    parts = [kron_ihvp(inv, v[i * per : (i + 1) * per]) for i, inv in enumerate(invs)]
    return np.concatenate(parts)


def dense_kron_matrix(delta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Materialized Delta (x) X consistent with row-major flattening (oracle use)."""
    return np.kron(delta, x)


def save_factors(path, factors: dict[str, KroneckerFactor]) -> None:
    """Factor checkpoint in the named-tensor container format.

    Per layer: `<name>/kind` (uint8 UTF-8), `<name>/meta` = [d_out, d_in,
    sample_count] (int64), `<name>/Delta` and `<name>/X` (float64 means).
    """
    from . import tensorio

    tensors: dict[str, np.ndarray] = {}
    for name in sorted(factors):
        fac = factors[name]
        tensors[f"{name}/kind"] = np.frombuffer(fac.kind.encode("utf-8"), dtype=np.uint8).copy()
        tensors[f"{name}/meta"] = np.array([fac.d_out, fac.d_in, fac.sample_count],
                                           dtype=np.int64)
        tensors[f"{name}/Delta"] = fac.Delta
        tensors[f"{name}/X"] = fac.X
    tensorio.write_tensors(path, tensors)


def load_factors(path) -> dict[str, KroneckerFactor]:
    from . import tensorio

    tensors = tensorio.read_tensors(path)
    names = sorted({key.rsplit("/", 1)[0] for key in tensors})
    out: dict[str, KroneckerFactor] = {}
    for name in names:
        try:
            kind = tensors[f"{name}/kind"].tobytes().decode("utf-8")
            d_out, d_in, count = (int(v) for v in tensors[f"{name}/meta"])
            delta, x = tensors[f"{name}/Delta"], tensors[f"{name}/X"]
        except KeyError as exc:
            raise DataError(f"{path}: incomplete factor record for {name!r}") from exc
        if delta.shape != (d_out, d_out) or x.shape != (d_in, d_in):
            raise DataError(f"{path}: factor {name!r} has inconsistent shapes")
        out[name] = KroneckerFactor(
            layer=name, kind=kind, d_out=d_out, d_in=d_in,
            delta_sum=delta * count, x_sum=x * count, sample_count=count,
        )
    return out
