"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 partial failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("avlse")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _config(path):
    from .trainer import TrainConfig

    return TrainConfig.load(path) if path else TrainConfig()


def cmd_gen_data(args) -> int:
    from .corpus import CorpusConfig, build_corpus

    snrs = [float(s) for s in args.snr_list.split(",") if s.strip()]
    build_corpus(args.n, snrs, args.seed, args.out, CorpusConfig(args.min_duration, args.max_duration))
    print(f"wrote {args.n} records to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .trainer import train

    cfg = _config(args.config)
    state = train(cfg, args.data, args.out, resume=args.resume)
    last = state.log[-1] if state.log else {}
    print(f"trained {state.step} steps; final total loss {last.get('total', float('nan')):.5f}; checkpoint {Path(args.out) / 'final.ckpt'}")
    return 0


def cmd_enhance(args) -> int:
    from . import ntf
    from .sampler import SamplerConfig, enhance
    from .signal import read_wav, write_wav
    from .trainer import load_inference

    models = load_inference(args.ckpt)
    noisy, sr = read_wav(args.inp)
    v = None
    if models.denoiser.cfg.use_visual:
        if not args.visual:
            print("this checkpoint needs --visual", file=sys.stderr)
            return 1
        v = ntf.load(args.visual)["visual"].astype(np.float64)
    out = enhance(noisy, v, models, SamplerConfig(steps=args.steps), seed=args.seed, sample_rate=sr)
    write_wav(args.out, out)
    print(f"wrote {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import evaluate
    from .plotting import plot_metric_report
    from .sampler import SamplerConfig
    from .trainer import load_inference

    models = load_inference(args.ckpt)
    report = evaluate(args.data, models, args.split, SamplerConfig(steps=args.steps), seed=args.seed, checkpoint=str(args.ckpt))
    report.write_csv(args.report)
    plot_metric_report(report, Path(args.report).with_suffix(".png"))
    print(f"{report.variant}: SI-SDR {report.mean_si_sdr:.2f} dB (noisy {report.mean_si_sdr_noisy:.2f} dB) over {len(report.rows)} utterances")
    if report.missing:
        print(f"missing records: {', '.join(report.missing)}", file=sys.stderr)
        return 2
    return 0


def cmd_inspect_sde(args) -> int:
    from .plotting import plot_sde_table
    from .sde import OUVESDE

    cfg = _config(args.config)
    rows = OUVESDE(cfg.sde).table(args.grid)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "g", "exp_neg_eta_t", "sigma"])
        for r in rows:
            w.writerow([repr(float(x)) for x in r])
    plot_sde_table(rows, out.with_suffix(".png"))
    return 0


def cmd_grad_check(args) -> int:
    from .audit import run_audit
    from .sde import OUVESDE

    cfg = _config(args.config)
    tol = args.tolerance
    results = run_audit(seed=args.seed, sde=OUVESDE(cfg.sde))
    bad = 0
    for name, err in results:
        ok = err <= tol
        bad += not ok
        print(f"{name:20s} max_rel_err={err:.3e} {'PASS' if ok else 'FAIL'}")
    return 0 if bad == 0 else 2


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="avlse", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="synthesise a corpus")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--snr-list", default="0")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--min-duration", type=float, default=1.0)
    g.add_argument("--max-duration", type=float, default=2.0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train denoiser + score model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("enhance", help="enhance one WAV file")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--visual")
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--steps", type=int, default=30)
    e.set_defaults(func=cmd_enhance)

    v = sub.add_parser("evaluate", help="SI-SDR / spectral MSE over a split")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--split", default="test")
    v.add_argument("--report", required=True)
    v.add_argument("--seed", type=int, default=1234)
    v.add_argument("--steps", type=int, default=30)
    v.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("inspect-sde", help="tabulate g(t), exp(-eta t), sigma(t)")
    s.add_argument("--config")
    s.add_argument("--grid", type=int, default=101)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_inspect_sde)

    c = sub.add_parser("grad-check", help="finite-difference audit of every differentiable block")
    c.add_argument("--config")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
