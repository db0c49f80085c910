"""Command-line entry point: ``hilora <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from . import experiment as ex
from .config import METHODS, apply_overrides, config_from_dict, load_config, parse_override
from .errors import HiloraError
from .lora_pool import PoolSpec, load_manifest, save_manifest, synthesize_pool
from .numerics import RngStream
from .router import RouterConfig, make_plan, route_tokens
from .task_model import DEFAULT_INSTRUCTION, SyntheticEmbedder, fit_pool_gaussians, task_of
from .theory import ALPHA_GRID, bounds_report, verify_id, verify_ood
from .world import WorldSpec, task_embeddings, world_from_manifest

log = logging.getLogger("hilora")


def _csv_list(kind):
    def parse(text: str):
        try:
            return [kind(t) for t in text.split(",") if t.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"bad list {text!r}: {exc}") from exc
    return parse


def _emit(obj, path=None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n")
    else:
        print(text)


def _experiment_config(args):
    doc = load_config(args.config) if getattr(args, "config", None) else {}
    overrides = [parse_override(s) for s in (getattr(args, "set", None) or [])]
    overrides.append(("seed", args.seed))
    if getattr(args, "method", None):
        overrides.append(("method", args.method))
    if getattr(args, "gamma", None) is not None:
        overrides.append(("router.gamma", args.gamma))
    if getattr(args, "manifest", None):
        overrides.append(("pool_manifest", args.manifest))
    out_dir = getattr(args, "out_dir", None)
    if out_dir:
        for name in ("records", "decisions"):
            overrides.append((f"output.{name}", str(Path(out_dir) / f"{name}.jsonl")))
        overrides.append(("output.summary", str(Path(out_dir) / "summary.json")))
    return config_from_dict(apply_overrides(doc, overrides))


# -- pool -------------------------------------------------------------------


def cmd_pool_synth(args) -> int:
    spec = PoolSpec(args.num_loras, args.dim, args.layers, args.ranks if len(args.ranks) > 1 else args.ranks[0],
                    structure=args.structure, clusters=args.clusters)
    pool = synthesize_pool(spec, RngStream(args.seed).child("pool"))
    save_manifest(pool, args.out)
    print(f"wrote {len(pool)} LoRAs to {args.out}")
    return 0


def cmd_pool_fit(args) -> int:
    pool = load_manifest(args.manifest)
    spec = WorldSpec(embed_dim=args.embed_dim, embed_scale=args.embed_scale, embed_spread=args.embed_spread)
    root = RngStream(args.seed)
    embedder = SyntheticEmbedder(task_embeddings(spec, pool.ids, root.child("embeddings")), args.seed)
    fitted = fit_pool_gaussians(pool, embedder, m=args.m, instruction=args.instruction, rng=root.child("fit"),
                                reg_lambda=args.reg_lambda)
    save_manifest(fitted, args.out or args.manifest)
    print(f"fitted {len(fitted)} Gaussians (m={args.m}, dim={args.embed_dim})")
    return 0


def cmd_pool_inspect(args) -> int:
    pool = load_manifest(args.manifest)
    info = {
        "model_dim": pool.model_dim,
        "num_layers": pool.num_layers,
        "loras": [{"id": m.id, "rank": m.rank} for m in pool.loras],
        "fitted": bool(pool.gaussians),
    }
    if pool.gaussians:
        info["bounds"] = bounds_report([pool.gaussians[i] for i in pool.ids], names=pool.ids)
    _emit(info)
    return 0


# -- route ------------------------------------------------------------------


def _read_inputs(path) -> list[str]:
    text = sys.stdin.read() if path == "-" else Path(path).read_text()
    return [line.strip() for line in text.splitlines() if line.strip()]


def cmd_route(args) -> int:
    pool = load_manifest(args.manifest)
    world = world_from_manifest(pool, args.seed)
    config = RouterConfig(gamma=args.gamma, k_min=args.k_min, projection_ranking=args.ranking, seed=args.seed)
    texts = list(args.text or [])
    if args.input:
        texts += _read_inputs(args.input)
    if not texts:
        raise HiloraError("no inputs given; use --input FILE or --text")
    for text in texts:
        task = task_of(text)
        inp = world.make_input(task, text.partition("::")[2])
        scores = ex.pool_scores(pool, inp.z)
        plan = make_plan(scores, pool.ranks, config, ex.route_rng(args.seed, inp.input_id))
        row = {"input": text, "candidates": list(plan.candidates), "allocation": plan.allocation}
        if args.emit_plans:
            row["plan"] = plan.to_dict()
            row["rocs"] = [route_tokens(plan, pool, li, inp.tokens, args.ranking)[0].to_dict()["selected"]
                           for li in range(pool.num_layers)]
        print(json.dumps(row, sort_keys=True))
    return 0


# -- experiments --------------------------------------------------------------


def cmd_run(args) -> int:
    config = _experiment_config(args)
    _, summary = ex.run_experiment(config)
    _emit(summary)
    return 0


def cmd_bench(args) -> int:
    config = _experiment_config(args)
    rows = ex.bench_throughput(config, args.sizes, repeats=args.repeats, per_task=args.per_task,
                               threads=args.threads)
    text = ex.write_csv(args.csv, rows)
    if not args.csv:
        print(text, end="")
    rates = [r["inputs_per_sec"] for r in rows]
    print(f"# monotone non-increasing: {all(a >= b for a, b in zip(rates, rates[1:]))}"
          + (f" (threads={args.threads}, scaling study)" if args.threads > 1 else ""), file=sys.stderr)
    return 0


def cmd_sweep(args) -> int:
    config = _experiment_config(args)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rows = ex.gamma_sweep(config, args.gammas, csv_path=args.csv)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    if args.with_gs_only:
        _, gs = ex.run_experiment(ex.with_method(config, "gs_only"))
        rows.append({"gamma": "gs_only", "mean_mse": gs["mean_mse"], "mean_total_rocs": gs["mean_total_rocs"],
                     "mean_candidates": gs["mean_candidates"]})
        if args.csv:
            ex.write_csv(args.csv, rows)
    if not args.csv:
        print(ex.write_csv(None, rows), end="")
    return 0


# -- theory -----------------------------------------------------------------


def cmd_theory_bounds(args) -> int:
    pool = load_manifest(args.manifest)
    if not pool.gaussians:
        raise HiloraError("manifest has no fitted Gaussians; run `pool fit` first")
    _emit(bounds_report([pool.gaussians[i] for i in pool.ids], args.ks, names=pool.ids), args.out)
    return 0


def cmd_theory_verify(args) -> int:
    rng = RngStream(args.seed)
    rows = []
    if args.kind in ("id", "both"):
        rows += verify_id(args.scenarios, args.trials, rng, args.ks)
    if args.kind in ("ood", "both"):
        rows += verify_ood(args.scenarios, args.trials, rng, args.ks)
    report = {
        "alpha_grid": list(ALPHA_GRID),
        "rows": [r.to_dict() for r in rows],
        "all_hold": all(r.holds for r in rows),
    }
    _emit(report, args.out)
    return 0 if report["all_hold"] else 1


# -- export -----------------------------------------------------------------


def cmd_export_pca(args) -> int:
    pool = load_manifest(args.manifest)
    _, _, text = ex.export_roc_pca(pool, args.which, args.layer, args.out)
    if not args.out:
        print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hilora", description="Training-free hierarchical routing over LoRA pools.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    pool = sub.add_parser("pool", help="synthesize, fit or inspect LoRA pool manifests")
    psub = pool.add_subparsers(dest="pool_command", required=True)
    s = psub.add_parser("synth", help="write a synthetic pool manifest")
    s.add_argument("--num-loras", type=int, default=5)
    s.add_argument("--dim", type=int, default=16)
    s.add_argument("--layers", type=int, default=3)
    s.add_argument("--ranks", type=_csv_list(int), default=[8], help="one rank, or one per LoRA (comma list)")
    s.add_argument("--structure", choices=("iid", "clustered"), default="clustered")
    s.add_argument("--clusters", type=int, default=2)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pool_synth)
    f = psub.add_parser("fit", help="fit one Gaussian per LoRA from synthetic instructed embeddings")
    f.add_argument("--manifest", required=True)
    f.add_argument("--out", help="defaults to rewriting --manifest")
    f.add_argument("--m", type=int, default=20)
    f.add_argument("--embed-dim", type=int, default=16)
    f.add_argument("--embed-scale", type=float, default=1e-3)
    f.add_argument("--embed-spread", type=float, default=6.0)
    f.add_argument("--reg-lambda", type=float, default=None)
    f.add_argument("--instruction", default=DEFAULT_INSTRUCTION)
    f.add_argument("--seed", type=int, required=True)
    f.set_defaults(func=cmd_pool_fit)
    i = psub.add_parser("inspect", help="summarize a manifest")
    i.add_argument("--manifest", required=True)
    i.set_defaults(func=cmd_pool_inspect)

    r = sub.add_parser("route", help="route inputs of the form task::item through a fitted pool")
    r.add_argument("--manifest", required=True)
    r.add_argument("--input", help="file with one input per line, or - for stdin")
    r.add_argument("--text", action="append", help="an input given inline (repeatable)")
    r.add_argument("--emit-plans", action="store_true", help="include full plans and per-layer ROC picks")
    r.add_argument("--gamma", type=float, default=0.4)
    r.add_argument("--k-min", type=int, default=3)
    r.add_argument("--ranking", choices=("raw", "abs"), default="raw")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_route)

    def experiment_args(q, method=True):
        q.add_argument("--config", help="experiment JSON")
        q.add_argument("--seed", type=int, required=True)
        q.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field by dotted path")
        q.add_argument("--manifest", help="use a saved pool instead of synthesizing one")
        if method:
            q.add_argument("--method", choices=METHODS)
            q.add_argument("--gamma", type=float)

    run = sub.add_parser("run", help="evaluate one method on a synthetic task world")
    experiment_args(run)
    run.add_argument("--out-dir", help="write records.jsonl, decisions.jsonl and summary.json here")
    run.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="throughput versus pool size")
    experiment_args(b, method=False)
    b.add_argument("--sizes", type=_csv_list(int), default=[5, 10, 20, 40])
    b.add_argument("--repeats", type=int, default=7)
    b.add_argument("--per-task", type=int, default=20)
    b.add_argument("--threads", type=int, default=1, help=">1 runs a labeled thread-scaling study")
    b.add_argument("--csv")
    b.set_defaults(func=cmd_bench)

    sw = sub.add_parser("sweep-gamma", help="HiLoRA MSE versus ROC budget fraction")
    experiment_args(sw, method=False)
    sw.add_argument("--gammas", type=_csv_list(float), default=[0.2, 0.4, 0.6, 0.8, 1.0])
    sw.add_argument("--with-gs-only", action="store_true", help="append a gs_only reference row")
    sw.add_argument("--csv")
    sw.set_defaults(func=cmd_sweep)

    th = sub.add_parser("theory", help="closed-form bounds and Monte-Carlo checks")
    tsub = th.add_subparsers(dest="theory_command", required=True)
    tb = tsub.add_parser("bounds", help="pairwise B matrix and top-k bounds for a fitted pool")
    tb.add_argument("--manifest", required=True)
    tb.add_argument("--ks", type=_csv_list(int), default=[1, 2, 3])
    tb.add_argument("--out")
    tb.set_defaults(func=cmd_theory_bounds)
    tv = tsub.add_parser("verify", help="Monte-Carlo exclusion rates against the bounds")
    tv.add_argument("--kind", choices=("id", "ood", "both"), default="both")
    tv.add_argument("--scenarios", type=int, default=20)
    tv.add_argument("--trials", type=int, default=100_000)
    tv.add_argument("--ks", type=_csv_list(int), default=[1, 2, 3])
    tv.add_argument("--seed", type=int, default=0)
    tv.add_argument("--out")
    tv.set_defaults(func=cmd_theory_verify)

    e = sub.add_parser("export", help="analysis exports")
    esub = e.add_subparsers(dest="export_command", required=True)
    pca = esub.add_parser("pca", help="2-D PCA of ROC vectors")
    pca.add_argument("--manifest", required=True)
    pca.add_argument("--which", choices=("a-vectors", "b-vectors"), default="b-vectors")
    pca.add_argument("--layer", type=int, default=0)
    pca.add_argument("--out")
    pca.set_defaults(func=cmd_export_pca)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (HiloraError, ValueError, KeyError, IndexError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
