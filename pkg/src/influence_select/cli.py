"""Command-line pipeline: cluster, score, select, oracle-check,
simulate-bandit, report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every output file carries the resolved-config fingerprint (CSV/JSONL inline;
binary artifacts get a ``.meta.json`` sidecar), and commands are idempotent:
identical config implies byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bandit as bandit_mod
from . import clustering, corpus, curvature, influence, oracle, trainer
from . import model as model_mod
from .config import RunConfig, fingerprint, load_config
from .errors import DataError, NumericError, UsageError


def _out(cfg: RunConfig, name: str) -> str:
    os.makedirs(cfg.paths.output_dir, exist_ok=True)
    return os.path.join(cfg.paths.output_dir, name)


def _require(path: str, producer: str) -> str:
    if not os.path.exists(path):
        raise DataError(f"missing artifact {path!r}; run the `{producer}` command first")
    return path


def _write_meta(path: str, fp: str, extra: dict | None = None) -> None:
    meta = {"config_fingerprint": fp}
    if extra:
        meta.update(extra)
    with open(path + ".meta.json", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(meta, sort_keys=True) + "\n")


def _load_corpus(cfg: RunConfig) -> corpus.EmbeddingCorpus:
    path = cfg.paths.embeddings
    if not os.path.exists(path):
        raise DataError(f"embeddings file {path!r} not found")
    return corpus.load_embeddings(path, format=cfg.paths.embedding_format)


def _load_instances(cfg: RunConfig, emb: corpus.EmbeddingCorpus):
    if not os.path.exists(cfg.paths.tokens):
        raise DataError(f"token file {cfg.paths.tokens!r} not found")
    instances = corpus.load_tokens(cfg.paths.tokens)
    vocab = cfg.model.vocab_size
    by_id = {}
    for inst in instances:
        if inst.id >= emb.count or inst.id < 0:
            raise DataError(f"instance id {inst.id} has no embedding row (corpus count {emb.count})")
        if max(inst.tokens) >= vocab:
            raise DataError(f"instance {inst.id} has token id >= vocab_size {vocab}")
        by_id[inst.id] = inst
    return instances, by_id


def _load_reference(cfg: RunConfig) -> corpus.ReferenceSet:
    if not os.path.exists(cfg.paths.reference):
        raise DataError(f"reference file {cfg.paths.reference!r} not found")
    return corpus.load_reference(cfg.paths.reference, cfg.model.vocab_size)


def _scoring_setup(cfg: RunConfig, ref: corpus.ReferenceSet, factor_path: str | None = None):
    """Model init, factor estimation over the reference set, reference iHVP."""
    params = model_mod.init_params(cfg.model.model_config(), seed=cfg.model.init_seed)
    registry = model_mod.tracked_layers(params.config, cfg.influence.kinds())
    factors = curvature.collect_factors(params, ref.sequences, registry)
    if factor_path is not None:
        curvature.save_factors(factor_path, factors)
        _write_meta(factor_path, fingerprint(cfg))
    inverses = {
        name: curvature.inverse_of_factor(fac, cfg.influence.damping)
        for name, fac in factors.items()
    }
    ref_grad = model_mod.grad_of_set(params, ref.sequences, registry)
    ihvp = influence.reference_ihvp(ref_grad, inverses, factor_id=fingerprint(cfg))
    projector = None
    if cfg.influence.use_sketch:
        projector = influence.SketchProjector(
            target_dim=cfg.influence.sketch_dim, seed=cfg.influence.sketch_seed
        )
    return params, registry, ihvp, projector


def cmd_cluster(cfg: RunConfig) -> int:
    fp = fingerprint(cfg)
    emb = _load_corpus(cfg)
    model = clustering.kmeans(
        emb,
        k=cfg.clustering.k,
        seed=cfg.clustering.seed,
        max_iters=cfg.clustering.max_iters,
        tol=cfg.clustering.tol,
        normalize=cfg.clustering.normalize,
    )
    path = _out(cfg, "clusters.bin")
    clustering.save_cluster_model(path, model)
    _write_meta(path, fp, {
        "k": model.k,
        "count": model.count,
        "objective": f"{clustering.objective(model, emb, cfg.clustering.normalize):.17g}",
        "iterations": model.n_iters,
        "converged": model.converged,
    })
    print(f"clustered {model.count} instances into k={model.k} "
          f"({model.n_iters} iterations, converged={model.converged})")
    return 0


def cmd_score(cfg: RunConfig, ids: list[int]) -> int:
    fp = fingerprint(cfg)
    emb = _load_corpus(cfg)
    _, by_id = _load_instances(cfg, emb)
    ref = _load_reference(cfg)
    params, registry, ihvp, projector = _scoring_setup(cfg, ref)
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise DataError(f"no token record for instance id(s) {missing[:5]}")
    table = influence.score_batch(
        [by_id[i] for i in ids], ihvp, params,
        projector=projector, registry=registry, workers=cfg.workers,
    )
    path = _out(cfg, "scores.csv")
    influence.write_influence_csv(path, table, fingerprint=fp)
    print(f"scored {len(ids)} instances -> {path}")
    return 0


def cmd_select(cfg: RunConfig) -> int:
    fp = fingerprint(cfg)
    emb = _load_corpus(cfg)
    _, by_id = _load_instances(cfg, emb)
    ref = _load_reference(cfg)
    cluster_path = _require(os.path.join(cfg.paths.output_dir, "clusters.bin"), "cluster")
    cmodel = clustering.load_cluster_model(cluster_path)
    if cmodel.count != emb.count:
        raise DataError(
            f"cluster model covers {cmodel.count} instances but corpus has {emb.count}; "
            "re-run the `cluster` command"
        )
    if cmodel.dim != emb.dim:
        raise DataError(
            f"cluster model dimension {cmodel.dim} does not match corpus {emb.dim}; "
            "re-run the `cluster` command"
        )
    params, registry, ihvp, projector = _scoring_setup(cfg, ref, _out(cfg, "factors.ntc"))

    if projector is None:
        def scorer(ids):
            return [influence.score_instance(by_id[i], ihvp, params, registry) for i in ids]
    else:
        sk = influence.sketch_ihvp(projector, ihvp)

        def scorer(ids):
            return [
                influence.score_instance_sketched(by_id[i], sk, projector, params, registry)
                for i in ids
            ]

    ledger = bandit_mod.run(
        cfg.bandit, cmodel, scorer, budget=cfg.selection.budget, seed=cfg.selection.seed
    )
    sel_path = _out(cfg, "selection.txt")
    led_path = _out(cfg, "ledger.jsonl")
    bandit_mod.write_selection(sel_path, ledger, fingerprint=fp)
    bandit_mod.write_ledger_jsonl(led_path, ledger, fingerprint=fp)
    print(
        f"selected {len(ledger.selected)} / budget {cfg.selection.budget} "
        f"in {len(ledger.iterations)} iterations"
        + (" [truncated]" if ledger.truncated else "")
    )
    return 0


def cmd_oracle_check(cfg: RunConfig) -> int:
    fp = fingerprint(cfg)
    oc = cfg.oracle
    rng = np.random.default_rng(oc.seed)

    # Kronecker identity suite: factored iHVP vs dense solve
    rows = []
    worst = 0.0
    for case in range(40):
        d_out = int(rng.integers(2, 9))
        d_in = int(rng.integers(2, 9))
        a = rng.normal(size=(d_out, d_out))
        b = rng.normal(size=(d_in, d_in))
        delta = a @ a.T + 0.05 * np.eye(d_out)
        x = b @ b.T + 0.05 * np.eye(d_in)
        for lam in (0.0, 1e-3, 1e-1):
            v = rng.normal(size=d_out * d_in)
            inv = curvature.factor_inverse(delta, x, lam)
            got = curvature.kron_ihvp(inv, v)
            dense = curvature.dense_kron_matrix(delta, x) + lam * np.eye(d_out * d_in)
            want = np.linalg.solve(dense, v)
            rel = float(np.linalg.norm(got - want) / np.linalg.norm(want))
            worst = max(worst, rel)
            rows.append((case, d_out, d_in, lam, rel))
    path = _out(cfg, "oracle_kronecker.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# config_fingerprint={fp}\n")
        fh.write("case,d_out,d_in,damping,rel_err\n")
        for case, d_out, d_in, lam, rel in rows:
            fh.write(f"{case},{d_out},{d_in},{lam:.17g},{rel:.17g}\n")
    if worst > 1e-10:
        raise NumericError(f"kronecker identity breach: rel err {worst:.3e} > 1e-10")

    # gradient check on a tiny model
    mcfg = model_mod.ModelConfig(
        vocab_size=oc.vocab_size, hidden_dim=oc.hidden_dim, n_layers=oc.n_layers,
        n_heads=oc.n_heads, max_context=4 * oc.seq_len, mlp_ratio=8.0 / 3.0,
    )
    params = model_mod.init_params(mcfg, seed=oc.seed)
    seqs = [rng.integers(0, oc.vocab_size, size=oc.seq_len).tolist() for _ in range(3)]
    gc_worst = _grad_check(params, seqs, samples=200, rng=rng)
    path = _out(cfg, "oracle_gradcheck.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# config_fingerprint={fp}\n")
        fh.write("check,worst_rel_err\n")
        fh.write(f"finite-difference-sample,{gc_worst:.17g}\n")
    if gc_worst > 1e-6:
        raise NumericError(f"gradient check breach: rel err {gc_worst:.3e} > 1e-6")

    # method correlations on the constructed qkv study
    data = oracle.make_qkv_study(
        n_curvature=4000, n_candidates=max(oc.candidates, 30),
        d_proj=6, d_in=8, coupling=0.85, seed=oc.seed,
    )
    reports, _ = oracle.run_qkv_study(data, damping=oc.damping)
    path = _out(cfg, "oracle_methods.csv")
    oracle.write_method_report_csv(path, reports, fingerprint=fp)
    by = {r.method: r.pearson for r in reports}
    if not (by["joint-qkv"] > by["independent-qkv"] > by["no-hessian"]):
        raise NumericError(f"method ordering violated: {by}")
    print(
        f"oracle checks passed: kron rel_err {worst:.2e}, grad rel_err {gc_worst:.2e}, "
        f"pearson joint={by['joint-qkv']:.3f} indep={by['independent-qkv']:.3f} "
        f"none={by['no-hessian']:.3f}"
    )
    return 0


def _grad_check(params, seqs, samples: int, rng) -> float:
    """Central-difference spot check over a random parameter sample."""
    grads = model_mod.zeros_like_params(params)
    gn = dict(grads.iter_named())
    for seq in seqs:
        _, cache = model_mod.forward(params, seq)
        g, _ = model_mod.backward(params, cache)
        for name, arr in g.iter_named():
            gn[name] += arr / len(seqs)

    def set_loss():
        import math

        return math.fsum(model_mod.forward(params, s)[0] for s in seqs) / len(seqs)

    names = [name for name, _ in params.iter_named()]
    h = 1e-5
    worst = 0.0
    for _ in range(samples):
        name = names[int(rng.integers(len(names)))]
        arr = dict(params.iter_named())[name]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        old = arr[idx]
        arr[idx] = old + h
        lp = set_loss()
        arr[idx] = old - h
        lm = set_loss()
        arr[idx] = old
        fd = (lp - lm) / (2 * h)
        an = gn[name][idx]
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-3))
    return worst


def cmd_simulate_bandit(cfg: RunConfig) -> int:
    fp = fingerprint(cfg)
    sc = cfg.sim
    results = bandit_mod.simulate_policies(
        n_arms=sc.arms, steps=sc.steps, trials=sc.trials,
        alpha=sc.alpha, sigma=sc.sigma, members_per_arm=sc.members_per_arm,
        seed=sc.seed, best_mean=sc.best_mean, spread=sc.spread,
    )
    path = _out(cfg, "regret.csv")
    bandit_mod.write_regret_csv(path, results, fingerprint=fp)
    ucb = [r for r in results if r.policy == "ucb"]
    hits = sum(int(np.argmax(r.pull_counts)) == r.best_arm for r in ucb)
    print(f"simulated {sc.trials} trials x {sc.steps} steps; "
          f"ucb found best arm in {hits}/{len(ucb)} trials -> {path}")
    return 0


def cmd_report(cfg: RunConfig) -> int:
    fp = fingerprint(cfg)
    emb = _load_corpus(cfg)
    _, by_id = _load_instances(cfg, emb)
    ref = _load_reference(cfg)
    cmodel = clustering.load_cluster_model(
        _require(os.path.join(cfg.paths.output_dir, "clusters.bin"), "cluster")
    )
    sel_path = _require(os.path.join(cfg.paths.output_dir, "selection.txt"), "select")
    led_path = _require(os.path.join(cfg.paths.output_dir, "ledger.jsonl"), "select")
    selected = bandit_mod.read_selection(sel_path)

    # selection composition per cluster
    comp = np.zeros(cmodel.k, dtype=np.int64)
    for i in selected:
        comp[int(cmodel.assignment[i])] += 1
    path = _out(cfg, "report_composition.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# config_fingerprint={fp}\n")
        fh.write("cluster,selected_count\n")
        for ci in range(cmodel.k):
            fh.write(f"{ci},{int(comp[ci])}\n")

    # mean-reward trajectories from the ledger
    reward = np.zeros(cmodel.k)
    pulls = np.zeros(cmodel.k, dtype=np.int64)
    traj_rows = []
    with open(led_path, "r", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if "iteration" not in rec:
                continue
            for p in rec.get("pulls", []):
                ci = p["cluster"]
                batch = p["sampled_ids"]
                add = p["batch_sum"]
                if cfg.bandit.reward_mode == "mean" and batch:
                    add = add / len(batch)
                reward[ci] += add
                pulls[ci] += 1
                traj_rows.append((rec["iteration"], ci, reward[ci] / pulls[ci]))
    path = _out(cfg, "report_trajectories.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# config_fingerprint={fp}\n")
        fh.write("iteration,cluster,mean_reward\n")
        for it, ci, mean in traj_rows:
            fh.write(f"{it},{ci},{mean:.17g}\n")

    # end-to-end loss table: selection vs random vs top-clusters baselines
    params = model_mod.init_params(cfg.model.model_config(), seed=cfg.model.init_seed)
    n = len(selected)
    rows = [("initial", trainer.eval_loss(params, ref))]
    if n:
        rows.append(("selected", _train_eval(cfg, params, [by_id[i].tokens for i in selected], ref)))
        rng = np.random.default_rng(cfg.report.baseline_seed)
        rand_ids = [int(i) for i in rng.choice(emb.count, size=n, replace=False)]
        rows.append(("random", _train_eval(cfg, params, [by_id[i].tokens for i in rand_ids], ref)))
        top_ids = _top_cluster_ids(cmodel, reward, pulls, n, cfg.report.baseline_seed)
        rows.append(("top-clusters", _train_eval(cfg, params, [by_id[i].tokens for i in top_ids], ref)))
    path = _out(cfg, "report_loss.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# config_fingerprint={fp}\n")
        fh.write("method,reference_loss\n")
        for name, loss in rows:
            fh.write(f"{name},{loss:.17g}\n")
    print("report written:", ", ".join(name for name, _ in rows))
    return 0


def _train_eval(cfg: RunConfig, params, seqs, ref) -> float:
    trained = trainer.train(params, seqs, cfg.trainer)
    return trainer.eval_loss(trained, ref)


def _top_cluster_ids(cmodel, reward, pulls, n: int, seed: int) -> list[int]:
    """Baseline: uniform sample of n ids from the top clusters by mean reward,
    taking clusters in rank order until their union can cover n."""
    means = np.where(pulls > 0, reward / np.maximum(pulls, 1), -np.inf)
    order = np.argsort(-means, kind="stable")
    pool: list[int] = []
    for ci in order:
        pool.extend(int(i) for i in cmodel.members(int(ci)))
        if len(pool) >= n:
            break
    rng = np.random.default_rng(seed)
    if len(pool) < n:
        return pool
    return [int(i) for i in rng.choice(np.asarray(pool), size=n, replace=False)]


def _parse_ids(args) -> list[int]:
    if args.ids_file:
        with open(args.ids_file, "r", encoding="utf-8") as fh:
            return [int(tok) for tok in fh.read().split()]
    if args.ids:
        return [int(tok) for tok in args.ids.split(",") if tok.strip()]
    raise UsageError("score needs --ids or --ids-file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="influence-select",
        description="Quality-diversity data selection with influence-scored bandit sampling",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("cluster", "score", "select", "oracle-check", "simulate-bandit", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key-value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry (flags win over the file)")
        if name == "score":
            p.add_argument("--ids", default=None, help="comma-separated instance ids")
            p.add_argument("--ids-file", default=None, help="whitespace-separated id file")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        cfg = load_config(args.config, args.set)
        if args.command == "cluster":
            return cmd_cluster(cfg)
        if args.command == "score":
            return cmd_score(cfg, _parse_ids(args))
        if args.command == "select":
            return cmd_select(cfg)
        if args.command == "oracle-check":
            return cmd_oracle_check(cfg)
        if args.command == "simulate-bandit":
            return cmd_simulate_bandit(cfg)
        if args.command == "report":
            return cmd_report(cfg)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
