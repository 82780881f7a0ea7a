"""Brute-force ground truth at tiny scale.

Everything here materializes what the fast path only approximates: dense
curvature over the full tracked-parameter vector, dense damped solves, and
exact influence scores. The comparison harness scores the same candidates
with the no-Hessian / independent-QKV / joint-QKV approximations and reports
their correlation against the exact scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .curvature import (
    KroneckerFactor,
    accumulate,
    collect_factors,
    inverse_of_factor,
    kron_ihvp,
    qkv_block_inverses,
    qkv_blockwise_ihvp,
    zero_factor,
)
from .errors import DataError, NumericError
from .model import (
    LayerTap,
    ParamSet,
    TrackedLayer,
    backward,
    backward_from_dlogits,
    concat_layer_vectors,
    flat_layer_grads,
    forward,
    grad_of_set,
    tracked_layers,
)

PARAM_CAP = 3000
SOLVE_RESIDUAL_RTOL = 1e-9

METHODS = ("no-hessian", "independent-qkv", "joint-qkv")


@dataclass
class DenseCurvature:
    matrix: np.ndarray  # (P, P)
    registry: list[TrackedLayer]
    definition: str  # empirical-gradient-outer-product | gauss-newton

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def layer_slice(self, name: str):
        off = 0
        for tl in self.registry:
            if tl.name == name:
                return slice(off, off + tl.flat_dim)
            off += tl.flat_dim
        raise DataError(f"unknown tracked layer {name!r}")


def dense_curvature(
    params: ParamSet,
    dataset,
    definition: str = "empirical-gradient-outer-product",
    registry=None,
    param_cap: int = PARAM_CAP,
) -> DenseCurvature:
    """Exact curvature over the flattened tracked parameters.

    "empirical-gradient-outer-product" is the mean of per-sequence flattened
    gradient outer products (the quantity the Kronecker factorization
    targets); "gauss-newton" is the model's predictive-distribution Fisher,
    computed by enumerating labels per position.
    """
    registry = registry if registry is not None else tracked_layers(params.config)
    P = sum(tl.flat_dim for tl in registry)
    if P > param_cap:
        raise DataError(f"tracked parameter count {P} exceeds dense cap {param_cap}")
    H = np.zeros((P, P))
    if definition == "empirical-gradient-outer-product":
        for seq in dataset:
            _, cache = forward(params, seq)
            grads, _ = backward(params, cache)
            g = concat_layer_vectors(flat_layer_grads(grads, registry), registry)
            H += np.outer(g, g)
        H /= len(dataset)
    elif definition == "gauss-newton":
        for seq in dataset:
            _, cache = forward(params, seq)
            T = cache.tokens.size
            n_pred = T - 1
            for t in range(n_pred):
                p_t = cache.probs[t]
                for y in range(params.config.vocab_size):
                    w = p_t[y]
                    if w < 1e-14:
                        continue
                    dlogits = np.zeros_like(cache.logits)
                    dlogits[t] = p_t
                    dlogits[t, y] -= 1.0
                    dlogits /= n_pred
                    grads, _ = backward_from_dlogits(params, cache, dlogits)
                    g = concat_layer_vectors(flat_layer_grads(grads, registry), registry)
                    H += w * np.outer(g, g)
        H /= len(dataset)
    else:
        raise DataError(f"unknown curvature definition {definition!r}")
    return DenseCurvature(matrix=H, registry=registry, definition=definition)


def dense_ihvp(H: np.ndarray, v: np.ndarray, damping: float) -> np.ndarray:
    """Solve (H + lambda I) x = v and validate the residual."""
    A = H + damping * np.eye(H.shape[0])
    x = np.linalg.solve(A, v)
    resid = np.linalg.norm(A @ x - v)
    vnorm = np.linalg.norm(v)
    if vnorm > 0 and resid > SOLVE_RESIDUAL_RTOL * vnorm:
        raise NumericError(
            f"dense solve residual {resid:.3e} exceeds {SOLVE_RESIDUAL_RTOL:.0e} * ||v||"
        )
    return x


def exact_influence(grad_z: np.ndarray, ref_grad: np.ndarray, H: DenseCurvature | np.ndarray,
                    damping: float) -> float:
    """<grad(z), (H + lambda I)^-1 grad(ref)>, same orientation as the fast path."""
    mat = H.matrix if isinstance(H, DenseCurvature) else H
    return float(np.dot(grad_z, dense_ihvp(mat, ref_grad, damping)))


@dataclass
class MethodReport:
    method: str
    pearson: float
    spearman: float
    n: int


def method_correlations(exact_scores, approx_by_method: dict[str, np.ndarray]) -> list[MethodReport]:
    exact_scores = np.asarray(exact_scores, dtype=np.float64)
    if np.std(exact_scores) == 0.0:
        raise NumericError("exact score vector has zero variance")
    out = []
    for method, scores in approx_by_method.items():
        scores = np.asarray(scores, dtype=np.float64)
        if np.std(scores) == 0.0:
            raise NumericError(f"{method} score vector has zero variance")
        out.append(
            MethodReport(
                method=method,
                pearson=float(stats.pearsonr(scores, exact_scores)[0]),
                spearman=float(stats.spearmanr(scores, exact_scores)[0]),
                n=exact_scores.shape[0],
            )
        )
    return out


def compare_methods(
    candidates,
    params: ParamSet,
    ref_set,
    damping: float,
    curvature_set=None,
    registry=None,
) -> list[MethodReport]:
    """Correlate the three approximations against exact dense influence.

    candidates are token sequences; the dense curvature and the Kronecker
    factors are both estimated from ``curvature_set`` (default: the
    reference set) so the comparison isolates the structural approximation.
    """
    if len(candidates) < 2:
        raise DataError("need at least two candidates for a correlation")
    registry = registry if registry is not None else tracked_layers(params.config)
    curvature_set = curvature_set if curvature_set is not None else ref_set

    ref_layer = grad_of_set(params, ref_set, registry)
    ref_flat = concat_layer_vectors(ref_layer, registry)
    cand_grads = []
    for seq in candidates:
        g = grad_of_set(params, [seq], registry)
        cand_grads.append((g, concat_layer_vectors(g, registry)))

    H = dense_curvature(params, curvature_set, registry=registry)
    exact = np.array([exact_influence(flat, ref_flat, H, damping) for _, flat in cand_grads])

    factors = collect_factors(params, curvature_set, registry)
    approx = {
        "no-hessian": np.array([float(np.dot(flat, ref_flat)) for _, flat in cand_grads]),
        "independent-qkv": _factored_scores(cand_grads, ref_layer, factors, damping, joint=False),
        "joint-qkv": _factored_scores(cand_grads, ref_layer, factors, damping, joint=True),
    }
    return method_correlations(exact, approx)


def _factored_scores(cand_grads, ref_layer, factors: dict[str, KroneckerFactor],
                     damping: float, joint: bool) -> np.ndarray:
    ihvp = {}
    for name, vec in ref_layer.items():
        fac = factors[name]
        if fac.kind == "qkv-joint" and not joint:
            ihvp[name] = qkv_blockwise_ihvp(qkv_block_inverses(fac, damping), vec)
        else:
            ihvp[name] = kron_ihvp(inverse_of_factor(fac, damping), vec)
    scores = []
    for g, _ in cand_grads:
        scores.append(sum(float(np.dot(g[n], ihvp[n])) for n in g))
    return np.array(scores)


# ----------------------------------------------- constructed qkv study data


@dataclass
class QkvStudyData:
    """A single synthetic joint-QKV block: curvature samples, a reference
    gradient, and candidate gradients, all as raw (x, delta) pairs."""

    d_proj: int
    d_in: int
    curv_x: np.ndarray  # (n, d_in)
    curv_delta: np.ndarray  # (n, 3*d_proj)
    cand_x: np.ndarray
    cand_delta: np.ndarray
    ref_grad: np.ndarray  # (3*d_proj*d_in,)


def make_qkv_study(
    n_curvature: int,
    n_candidates: int,
    d_proj: int,
    d_in: int,
    coupling: float,
    seed: int,
    decorrelate: bool = False,
) -> QkvStudyData:
    """Draw (x, delta) samples for a fake joint-QKV layer.

    ``coupling`` in [0, 1) mixes a shared latent into the q/k/v deltas so
    their cross-correlation can be dialed up. With ``decorrelate`` every
    sample is expanded into four block-sign copies whose cross moments cancel
    exactly, leaving the diagonal blocks untouched.
    """
    rng = np.random.default_rng(seed)
    # one anisotropic distribution shared by curvature, candidate and ref draws
    scales_x = np.exp(rng.uniform(-1.5, 1.5, size=d_in))
    basis_x = np.linalg.qr(rng.normal(size=(d_in, d_in)))[0]
    scales_delta = np.exp(rng.uniform(-1.0, 1.0, size=3 * d_proj))

    def draw(n):
        x = (rng.normal(size=(n, d_in)) * scales_x) @ basis_x.T
        shared = rng.normal(size=(n, d_proj))
        own = rng.normal(size=(n, 3 * d_proj))
        delta = np.empty((n, 3 * d_proj))
        for b in range(3):
            sl = slice(b * d_proj, (b + 1) * d_proj)
            delta[:, sl] = coupling * shared + (1.0 - coupling) * own[:, sl]
        delta = delta * scales_delta
        return x, delta

    curv_x, curv_delta = draw(n_curvature)
    cand_x, cand_delta = draw(n_candidates)
    if decorrelate:
        curv_x, curv_delta = decorrelate_qkv(curv_x, curv_delta, d_proj)
    ref_x, ref_delta = draw(64)
    ref_grad = np.einsum("ni,nj->ij", ref_delta, ref_x).ravel() / ref_x.shape[0]
    return QkvStudyData(
        d_proj=d_proj, d_in=d_in,
        curv_x=curv_x, curv_delta=curv_delta,
        cand_x=cand_x, cand_delta=cand_delta,
        ref_grad=ref_grad,
    )


def decorrelate_qkv(x: np.ndarray, delta: np.ndarray, d_proj: int):
    """Expand samples 4x with block-sign patterns whose q/k/v cross moments
    cancel exactly while every diagonal block is preserved."""
    patterns = [(1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)]
    xs, ds = [], []
    for sq, sk, sv in patterns:
        d = delta.copy()
        d[:, 0 * d_proj : 1 * d_proj] *= sq
        d[:, 1 * d_proj : 2 * d_proj] *= sk
        d[:, 2 * d_proj : 3 * d_proj] *= sv
        xs.append(x.copy())
        ds.append(d)
    return np.concatenate(xs), np.concatenate(ds)


def qkv_factor_from_samples(x: np.ndarray, delta: np.ndarray) -> KroneckerFactor:
    tl = TrackedLayer("study.qkv-joint", 0, "qkv-joint", delta.shape[1], x.shape[1])
    return accumulate(zero_factor(tl), LayerTap(0, "qkv-joint", x=x, delta=delta))


def run_qkv_study(data: QkvStudyData, damping: float) -> tuple[list[MethodReport], dict]:
    """Score candidates with all three approximations against the dense oracle."""
    grads = np.einsum("ni,nj->nij", data.cand_delta, data.cand_x).reshape(
        data.cand_x.shape[0], -1
    )
    curv_grads = np.einsum("ni,nj->nij", data.curv_delta, data.curv_x).reshape(
        data.curv_x.shape[0], -1
    )
    H = curv_grads.T @ curv_grads / curv_grads.shape[0]
    if H.shape[0] > PARAM_CAP:
        raise DataError(f"study dimension {H.shape[0]} exceeds dense cap {PARAM_CAP}")
    exact_vec = dense_ihvp(H, data.ref_grad, damping)
    exact = grads @ exact_vec

    fac = qkv_factor_from_samples(data.curv_x, data.curv_delta)
    joint_vec = kron_ihvp(inverse_of_factor(fac, damping), data.ref_grad)
    indep_vec = qkv_blockwise_ihvp(qkv_block_inverses(fac, damping), data.ref_grad)
    approx = {
        "no-hessian": grads @ data.ref_grad,
        "independent-qkv": grads @ indep_vec,
        "joint-qkv": grads @ joint_vec,
    }
    reports = method_correlations(exact, approx)
    detail = {"exact": exact, **approx,
              "joint_ihvp": joint_vec, "independent_ihvp": indep_vec}
    return reports, detail


def write_method_report_csv(path, reports: list[MethodReport], fingerprint: str = "") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if fingerprint:
            fh.write(f"# config_fingerprint={fingerprint}\n")
        fh.write("method,pearson,spearman,n\n")
        for r in reports:
            fh.write(f"{r.method},{r.pearson:.17g},{r.spearman:.17g},{r.n}\n")
