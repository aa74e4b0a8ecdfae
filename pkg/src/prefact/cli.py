"""Command-line interface.

Exit codes: 0 success, 2 argument or configuration errors, 1 runtime errors.
``--json`` switches stdout to a single JSON document.
"""
import argparse
import json
import os
import sys

from prefact.errors import ArgumentError, ConfigError, PlanError, PrefactError

RATIO_HELP = "rank ratio as a fraction, e.g. 1/4"


def _int_list(text):
    try:
        return [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma separated integer list, got {text!r}")


def _emit(args, payload, lines):
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print("\n".join(lines))


def _table(rows, cols):
    widths = [max(len(c), *(len(str(r[i])) for r in rows)) if rows else len(c) for i, c in enumerate(cols)]
    out = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    out.append("  ".join("-" * w for w in widths))
    out += ["  ".join(str(v).ljust(w) for v, w in zip(r, widths)) for r in rows]
    return out


def _plan_for(arch, ratio, k):
    from prefact.zoo import default_plan
    return default_plan(arch, ratio=ratio, K=k)


# --- subcommands -----------------------------------------------------------------

def cmd_count(args):
    from prefact.factorize import parse_ratio
    from prefact.zoo import build_model

    ratio = parse_ratio(args.rank_ratio)
    plan = None
    if args.mode == "hybrid":
        plan = _plan_for(args.arch, ratio, args.k)
    model = build_model(args.arch, args.mode, plan=plan)
    rep = model.count_report()
    payload = {"arch_id": args.arch, "mode": args.mode, "params": rep["params"], "macs": rep["macs"]}
    if plan is not None:
        payload["plan"] = plan.to_json()
    if args.layers:
        payload["layers"] = rep["layers"]
    lines = [f"{args.arch} ({args.mode})",
             f"  parameters: {rep['params']:,}",
             f"  MACs:       {rep['macs']:,} ({rep['macs'] / 1e9:.4f} G)"]
    if plan is not None:
        lines.append(f"  plan:       K={plan.K} ratio={payload['plan']['ratio']}")
    if args.layers:
        rows = [(r["name"], r["kind"], r["rank"] if r["rank"] is not None else "-",
                 f"{r['params']:,}", f"{r['macs']:,}") for r in rep["layers"] if r["params"] or r["macs"]]
        lines += [""] + _table(rows, ("layer", "kind", "rank", "params", "macs"))
    _emit(args, payload, lines)
    return 0


def cmd_train(args):
    from prefact.checkpoint import save_checkpoint
    from prefact.config import load_config
    from prefact.datasets import load_dataset
    from prefact.train import prefactorized_train

    cfg = load_config(args.config)
    plan = cfg.build_plan()
    data = load_dataset(cfg.dataset)
    os.makedirs(args.out, exist_ok=True)
    model, log = prefactorized_train(cfg.arch_id, cfg.train, plan, data, cfg.model_options)
    metrics_path = os.path.join(args.out, cfg.output["metrics_csv"])
    ckpt_path = os.path.join(args.out, cfg.output["checkpoint"])
    log.to_csv(metrics_path)
    save_checkpoint(model, ckpt_path, epoch=cfg.train.epochs)
    last = log.rows[-1] if log.rows else {}
    summary = {
        "arch_id": cfg.arch_id, "epochs": cfg.train.epochs, "warmup_epochs": cfg.train.warmup_epochs,
        "switch_epoch": log.switch_epoch, "final_loss": last.get("loss"),
        "final_metric": last.get("metric"), "params": model.param_count(),
        "plan": plan.to_json(), "metrics_csv": metrics_path, "checkpoint": ckpt_path,
    }
    with open(os.path.join(args.out, cfg.output["summary"]), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    lines = [f"{'epoch':>5}  {'phase':8} {'lr':>10} {'loss':>12} {'metric':>10} {'params':>10}"]
    for r in log.rows:
        lines.append(f"{r['epoch']:>5}  {r['phase']:8} {r['lr']:>10.5g} {r['loss']:>12.6f} "
                     f"{r['metric']:>10.4f} {r['param_count']:>10,}")
    lines.append(f"wrote {metrics_path} and {ckpt_path}")
    _emit(args, summary, lines)
    return 0


def cmd_factorize(args):
    from prefact.checkpoint import load_checkpoint, save_checkpoint
    from prefact.factorize import FactorizationPlan, factorize_model

    model = load_checkpoint(args.ckpt)
    try:
        with open(args.plan) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.plan}: not valid JSON ({exc})") from None
    obj.setdefault("arch_id", model.arch_id)
    plan = FactorizationPlan.from_json(obj)
    hybrid = factorize_model(model, plan, workers=args.workers)
    save_checkpoint(hybrid, args.out, epoch=getattr(model, "epoch", 0))
    payload = {"arch_id": model.arch_id, "input": args.ckpt, "output": args.out,
               "params_before": model.param_count(), "params_after": hybrid.param_count(),
               "ranks": {k: v for k, v in hybrid.ranks().items() if v is not None}}
    lines = [f"factorized {args.ckpt} -> {args.out}",
             f"  parameters: {payload['params_before']:,} -> {payload['params_after']:,}"]
    lines += [f"  {k}: rank {v}" for k, v in payload["ranks"].items()]
    _emit(args, payload, lines)
    return 0


def cmd_simulate_comm(args):
    from prefact.commsim import ClusterModel, epoch_comm_time, layer_payloads
    from prefact.zoo import build_model

    mode = "per_layer" if args.per_layer else "flat"
    models = {"vanilla": build_model(args.arch, "vanilla"), "hybrid": build_model(args.arch, "hybrid")}
    rows = []
    for p in args.nodes:
        cluster = ClusterModel(p, args.alpha, args.beta)
        row = {"nodes": p}
        for name, m in models.items():
            sizes = layer_payloads(m)
            per_epoch = epoch_comm_time(m, cluster, args.iters, mode)
            row[name] = {"bytes": sum(sizes.values()), "calls_per_iter": 1 if mode == "flat" else len(sizes),
                         "seconds_per_iter": per_epoch / args.iters if args.iters else 0.0,
                         "seconds_per_epoch": per_epoch}
        v, h = row["vanilla"]["seconds_per_epoch"], row["hybrid"]["seconds_per_epoch"]
        row["ratio"] = h / v if v > 0 else 1.0
        rows.append(row)
    payload = {"arch_id": args.arch, "mode": mode, "alpha": args.alpha, "beta": args.beta,
               "iters": args.iters, "rows": rows}
    lines = [f"{args.arch}: {mode} ring-allreduce, alpha={args.alpha:g}s beta={args.beta:g}B/s "
             f"iters={args.iters}"]
    lines += _table([(r["nodes"], f"{r['vanilla']['seconds_per_epoch']:.6g}",
                      f"{r['hybrid']['seconds_per_epoch']:.6g}", f"{r['ratio']:.4f}") for r in rows],
                    ("nodes", "vanilla s/epoch", "hybrid s/epoch", "hybrid/vanilla"))
    if args.csv:
        import csv
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["nodes", "vanilla_bytes", "hybrid_bytes", "vanilla_seconds_per_epoch",
                        "hybrid_seconds_per_epoch", "ratio"])
            for r in rows:
                w.writerow([r["nodes"], r["vanilla"]["bytes"], r["hybrid"]["bytes"],
                            repr(r["vanilla"]["seconds_per_epoch"]),
                            repr(r["hybrid"]["seconds_per_epoch"]), repr(r["ratio"])])
    _emit(args, payload, lines)
    return 0


def cmd_gradcheck(args):
    from prefact.gradcheck import TOL, run_all

    rows = run_all(seed=args.seed)
    bad = [r for r in rows if not r["ok"]]
    payload = {"tolerance": TOL, "checked": len(rows), "failed": len(bad),
               "max_rel_error": max(r["rel_error"] for r in rows), "results": rows}
    lines = _table([(r["case"], r["tensor"], f"{r['rel_error']:.2e}", "ok" if r["ok"] else "FAIL")
                    for r in rows], ("case", "tensor", "rel error", ""))
    lines.append(f"{len(rows) - len(bad)}/{len(rows)} tensors within {TOL:g}")
    _emit(args, payload, lines)
    return 1 if bad else 0


def cmd_sweep_k(args):
    from prefact.factorize import parse_ratio
    from prefact.zoo import build_model

    ratio = parse_ratio(args.rank_ratio)
    cfg = data = None
    if args.config:
        from prefact.config import load_config
        from prefact.datasets import load_dataset
        cfg = load_config(args.config)
        if cfg.arch_id != args.arch:
            raise ArgumentError(f"config is for {cfg.arch_id!r}, sweep is for {args.arch!r}")
        data = load_dataset(cfg.dataset)
    rows = []
    for k in args.k_list:
        plan = _plan_for(args.arch, ratio, k)
        rep = build_model(args.arch, "hybrid", plan=plan).count_report()
        row = {"K": k, "params": rep["params"], "macs": rep["macs"]}
        if cfg is not None:
            from prefact.train import prefactorized_train
            _, log = prefactorized_train(args.arch, cfg.train, plan, data, cfg.model_options)
            row["final_loss"] = log.rows[-1]["loss"] if log.rows else None
            row["final_metric"] = log.rows[-1]["metric"] if log.rows else None
        rows.append(row)
    payload = {"arch_id": args.arch, "rank_ratio": str(ratio), "rows": rows}
    cols = ["K", "params", "macs"] + (["final_loss", "final_metric"] if cfg is not None else [])
    lines = _table([[r[c] if not isinstance(r[c], float) else f"{r[c]:.6g}" for c in cols] for r in rows], cols)
    _emit(args, payload, lines)
    return 0


def cmd_sweep_warmup(args):
    import dataclasses

    from prefact.config import load_config
    from prefact.datasets import load_dataset
    from prefact.train import prefactorized_train

    cfg = load_config(args.config)
    plan = cfg.build_plan()
    data = load_dataset(cfg.dataset)
    rows = []
    for ewu in args.ewu_list:
        if not 0 <= ewu <= cfg.train.epochs:
            raise ArgumentError(f"E_wu={ewu} outside [0, {cfg.train.epochs}]")
        tc = dataclasses.replace(cfg.train, warmup_epochs=ewu)
        model, log = prefactorized_train(cfg.arch_id, tc, plan, data, cfg.model_options)
        last = log.rows[-1] if log.rows else {}
        rows.append({"warmup_epochs": ewu, "final_loss": last.get("loss"),
                     "final_metric": last.get("metric"), "params": model.param_count()})
    payload = {"arch_id": cfg.arch_id, "epochs": cfg.train.epochs, "rows": rows}
    lines = _table([(r["warmup_epochs"], f"{r['final_loss']:.6g}", f"{r['final_metric']:.6g}",
                     f"{r['params']:,}") for r in rows], ("E_wu", "final loss", "final metric", "params"))
    _emit(args, payload, lines)
    return 0


# --- parser -------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(2)


def build_parser():
    from prefact.zoo import ARCH_IDS

    p = _Parser(prog="prefact", description="Low-rank pre-factorized training toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--json", action="store_true", help="emit JSON on stdout")
        return sp

    c = common(sub.add_parser("count", help="parameter and MAC counts"))
    c.add_argument("--arch", required=True, choices=ARCH_IDS)
    c.add_argument("--mode", default="vanilla", choices=("vanilla", "hybrid"))
    c.add_argument("--rank-ratio", default="1/4", help=RATIO_HELP)
    c.add_argument("--k", type=int, default=None, help="index of the first low-rank layer")
    c.add_argument("--layers", action="store_true", help="include per-layer records")
    c.set_defaults(func=cmd_count)

    t = common(sub.add_parser("train", help="warm-up, factorize, fine-tune from a run config"))
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    f = common(sub.add_parser("factorize", help="factorize a vanilla checkpoint"))
    f.add_argument("--ckpt", required=True)
    f.add_argument("--plan", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--workers", type=int, default=1, help="threads for per-layer SVDs")
    f.set_defaults(func=cmd_factorize)

    s = common(sub.add_parser("simulate-comm", help="ring-allreduce cost projection"))
    s.add_argument("--arch", required=True, choices=ARCH_IDS)
    s.add_argument("--nodes", required=True, type=_int_list, help="node count(s), e.g. 2,4,8,16")
    s.add_argument("--alpha", required=True, type=float, help="per-message latency, seconds")
    s.add_argument("--beta", required=True, type=float, help="bandwidth, bytes per second")
    s.add_argument("--iters", required=True, type=int, help="iterations per epoch")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--flat", action="store_true", help="one packed buffer per iteration (default)")
    g.add_argument("--per-layer", action="store_true", help="one allreduce per layer")
    s.add_argument("--csv", default=None, help="also write the table as CSV")
    s.set_defaults(func=cmd_simulate_comm)

    gc = common(sub.add_parser("gradcheck", help="finite-difference checks of every layer kind"))
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)

    k = common(sub.add_parser("sweep-k", help="hybrid size (and optionally loss) versus K"))
    k.add_argument("--arch", required=True, choices=ARCH_IDS)
    k.add_argument("--k-list", required=True, type=_int_list)
    k.add_argument("--rank-ratio", default="1/4", help=RATIO_HELP)
    k.add_argument("--config", default=None, help="run config; trains each hybrid when given")
    k.set_defaults(func=cmd_sweep_k)

    w = common(sub.add_parser("sweep-warmup", help="final loss versus warm-up epochs"))
    w.add_argument("--config", required=True)
    w.add_argument("--ewu-list", required=True, type=_int_list)
    w.set_defaults(func=cmd_sweep_warmup)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "nodes", None) is not None and any(n < 2 for n in args.nodes):
            raise ArgumentError("node counts must be >= 2")
        if getattr(args, "iters", None) is not None and args.iters < 0:
            raise ArgumentError("iters must be >= 0")
        return args.func(args)
    except (ArgumentError, ConfigError, PlanError) as exc:
        print(f"prefact {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (PrefactError, OSError) as exc:
        print(f"prefact {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
