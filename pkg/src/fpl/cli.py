"""Command-line entry point: synth, train, eval and inspect workflows.

Exit codes: 0 success, 1 usage error, 2 data error.  Thread count for
the numerical backend comes from --threads or the FPL_THREADS
environment variable (environment wins); it must be applied before the
numerical modules are imported, so all heavy imports happen inside the
subcommand handlers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fpl", description="Few-shot feature projection workflows.")
    parser.add_argument("--threads", type=int, default=None,
                        help="numerical backend threads (default: hardware count)")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic feature pack")
    p_synth.add_argument("--d", type=int, default=5, help="number of classes")
    p_synth.add_argument("--n", type=int, default=4, help="shots per class")
    p_synth.add_argument("--h", type=int, default=2, help="feature-map height")
    p_synth.add_argument("--w", type=int, default=2, help="feature-map width")
    p_synth.add_argument("--c", type=int, default=16, help="map channels")
    p_synth.add_argument("--ct", type=int, default=16, help="text/global feature dim")
    p_synth.add_argument("--class-separation", type=float, default=1.0)
    p_synth.add_argument("--noise-sigma", type=float, default=0.1)
    p_synth.add_argument("--queries-per-class", type=int, default=10)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--raw-locations", action="store_true",
                         help="do not L2-normalize location vectors")
    p_synth.add_argument("--out", required=True, help="output pack path")

    p_train = sub.add_parser("train", help="train (mu, epsilon) on a pack")
    p_train.add_argument("--pack", required=True)
    p_train.add_argument("--out", default=None,
                         help="state snapshot path (default: <pack>.state.json)")
    p_train.add_argument("--epochs", type=int, default=20)
    p_train.add_argument("--lr", type=float, default=1e-3)
    p_train.add_argument("--gamma", type=float, default=0.1)
    p_train.add_argument("--eta", type=float, default=1.0)
    p_train.add_argument("--batch-size", type=int, default=64)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--weight-decay", type=float, default=0.0)
    p_train.add_argument("--no-po", action="store_true",
                         help="ablation: drop the orthogonality loss")
    p_train.add_argument("--fixed-delta", action="store_true",
                         help="ablation: freeze mu at 0 (delta = 1)")
    p_train.add_argument("--po-doubled", action="store_true",
                         help="use the 2/(D(D-1)) orthogonality prefactor")
    p_train.add_argument("--no-leave-self-out", action="store_true",
                         help="exact-paper pooling: keep the query's own rows")
    p_train.add_argument("--quiet", action="store_true",
                         help="suppress per-epoch log records")

    p_eval = sub.add_parser("eval", help="evaluate a pack and write a report")
    p_eval.add_argument("--pack", required=True)
    p_eval.add_argument("--state", default=None,
                        help="state snapshot from `fpl train` (fpl method)")
    p_eval.add_argument("--method", choices=["fpl", "clip", "ncm"], default="fpl")
    p_eval.add_argument("--eta", type=float, default=1.0)
    p_eval.add_argument("--gamma", type=float, default=0.1)
    p_eval.add_argument("--out", default=None,
                        help="report path (default: <pack>.report.json)")

    p_inspect = sub.add_parser("inspect", help="print a pack's manifest summary")
    p_inspect.add_argument("pack", help="pack path")

    return parser


def _apply_threads(threads):
    env = os.environ.get("FPL_THREADS")
    if env is not None:
        threads = int(env)
    if threads is None:
        return
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(threads)


def _cmd_synth(args) -> int:
    from .dataio import SynthSpec, gen_synthetic, write_pack

    spec = SynthSpec(
        d=args.d, n=args.n, h=args.h, w=args.w, c=args.c, c_t=args.ct,
        class_separation=args.class_separation, noise_sigma=args.noise_sigma,
        queries_per_class=args.queries_per_class, seed=args.seed,
        normalize_locations=not args.raw_locations,
    )
    pack = gen_synthetic(spec)
    write_pack(pack, args.out)
    print(f"wrote {args.out}: D={spec.d} N={spec.n} "
          f"dims=({spec.h},{spec.w},{spec.c},{spec.c_t}) seed={spec.seed}")
    return 0


def _cmd_train(args) -> int:
    from .classifier import HyperParams
    from .dataio import read_pack
    from .trainer import Ablation, train

    pack = read_pack(args.pack)
    hp = HyperParams(
        eta=args.eta, gamma=args.gamma, lr=args.lr, epochs=args.epochs,
        batch_size=args.batch_size, seed=args.seed,
        weight_decay=args.weight_decay, po_doubled=args.po_doubled,
        leave_self_out=not args.no_leave_self_out,
    )
    ablation = Ablation(po_off=args.no_po, freeze_mu=args.fixed_delta)
    log_stream = None if args.quiet else sys.stdout
    state = train(pack, hp, ablation, log_stream=log_stream)
    out = args.out or (args.pack + ".state.json")
    snapshot = state.to_json()
    snapshot["hyperparams"] = {
        "eta": hp.eta, "gamma": hp.gamma, "lr": hp.lr, "epochs": hp.epochs,
        "batch_size": hp.batch_size, "seed": hp.seed,
        "weight_decay": hp.weight_decay, "po_doubled": hp.po_doubled,
        "leave_self_out": hp.leave_self_out,
    }
    snapshot["ablation"] = {"po_off": ablation.po_off,
                            "freeze_mu": ablation.freeze_mu}
    with open(out, "w") as fh:
        json.dump(snapshot, fh, indent=2)
        fh.write("\n")
    print(f"wrote {out}: mu={state.params.mu:.6g} "
          f"epsilon={state.params.epsilon:.6g}", file=sys.stderr)
    return 0


def _cmd_eval(args) -> int:
    from .classifier import FplParams, HyperParams
    from .dataio import read_pack
    from .evalharness import (
        baseline_clip_zero_shot,
        baseline_nearest_class_mean,
        evaluate,
    )
    from .trainer import TrainState, _AdamScalar

    pack = read_pack(args.pack)
    hp = HyperParams(eta=args.eta, gamma=args.gamma)
    if args.method == "clip":
        report = baseline_clip_zero_shot(pack, hp)
    elif args.method == "ncm":
        report = baseline_nearest_class_mean(pack, hp)
    else:
        params = FplParams()
        if args.state is not None:
            with open(args.state) as fh:
                snap = json.load(fh)
            params = FplParams(mu=float(snap["mu"]), epsilon=float(snap["epsilon"]))
        state = TrainState(params=params, step=0, adam_mu=_AdamScalar(),
                           adam_epsilon=_AdamScalar(), base_lr=0.0,
                           total_steps=0, rng_seed=0)
        report = evaluate(pack, state, hp)
    payload = json.dumps(report.to_json(), indent=2)
    out = args.out or (args.pack + ".report.json")
    with open(out, "w") as fh:
        fh.write(payload)
        fh.write("\n")
    print(payload)
    return 0


def _cmd_inspect(args) -> int:
    from .dataio import read_pack

    pack = read_pack(args.pack)
    h, w, c, c_t = pack.dims
    shots = [len(s) for s in pack.support]
    n_desc = str(shots[0]) if len(set(shots)) == 1 else f"{min(shots)}..{max(shots)}"
    train_q = len(pack.queries_for_split("train"))
    test_q = len(pack.queries_for_split("test"))
    print(f"pack: {args.pack}")
    print(f"D={pack.num_classes} N={n_desc} dims: H={h} W={w} C={c} C_t={c_t}")
    print(f"tau={pack.tau} normalize_locations={pack.normalize_locations}")
    print(f"queries: train={train_q} test={test_q}")
    print(f"prompt_template={pack.prompt_template!r}")
    print("classes: " + ", ".join(pack.class_names[:8])
          + (" ..." if pack.num_classes > 8 else ""))
    return 0


def run(argv=None) -> int:
    """Parse argv and dispatch; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"fpl: error: {exc}", file=sys.stderr)
        return 1
    _apply_threads(args.threads)

    from .errors import FplError

    handlers = {
        "synth": _cmd_synth,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "inspect": _cmd_inspect,
    }
    try:
        return handlers[args.subcommand](args)
    except FplError as exc:
        print(f"fpl: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"fpl: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
