"""Command-line entry point: ``lavq <subcommand> ...``.

Exit codes: 0 success, 1 invalid input (bad flag, config or record), 2
runtime failure. Every written path is echoed on stdout.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .config import TrainConfig, dump_config, load_config
from .errors import FormatError, ValidationError

logger = logging.getLogger("lavq")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ValidationError(f"override {pair!r} is not key=value")
        k, v = pair.split("=", 1)
        out[k.strip()] = v
    return out


def _config(args) -> TrainConfig:
    base = TrainConfig.desk() if getattr(args, "desk", False) else TrainConfig()
    return load_config(getattr(args, "config", None), _overrides(getattr(args, "set", None)), base)


def _echo(*paths):
    for p in paths:
        print(p)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_gen_data(args):
    from .data import CorpusConfig, build_corpus

    build_corpus(CorpusConfig(), args.seed, args.out, raw=args.raw)
    _echo(Path(args.out) / "manifest.jsonl")


def cmd_preprocess(args):
    from .data import load_corpus, preprocess, write_corpus

    corpus = load_corpus(args.manifest)
    pairs = [(s, preprocess(r)) for s, recs in corpus.items() for r in recs]
    write_corpus(pairs, args.out)
    _echo(Path(args.out) / "manifest.jsonl")


def cmd_train(args):
    from .data import load_corpus
    from .trainer import train

    cfg = _config(args)
    corpus = load_corpus(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    train(cfg, corpus["train"], corpus["val"], out)
    _echo(out / "config.txt", out / "losses.csv", out / "validation.csv", out / "checkpoint.bin")


def cmd_twin(args):
    from .checkpoint import load_checkpoint
    from .model import generate_twin
    from .recordio import read_record, write_record

    model = load_checkpoint(args.ckpt).model
    twin = generate_twin(model, read_record(args.pre), read_record(args.ref))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_record(twin, args.out)
    _echo(args.out)


def cmd_eval(args):
    from .checkpoint import load_checkpoint
    from .data import load_corpus
    from .evaluation import evaluate

    model = load_checkpoint(args.ckpt).model
    report = evaluate(model, load_corpus(args.manifest), twins_per_patient=args.twins,
                      seed=args.seed)
    _echo(report.write(args.out))


def cmd_privacy(args):
    from .checkpoint import load_checkpoint
    from .data import load_corpus
    from .evaluation import (DEFAULT_TAUS, membership_curve, protocol_twins,
                             train_feature_extractor)

    model = load_checkpoint(args.ckpt).model
    corpus = load_corpus(args.manifest)
    taus = _floats(args.taus) if args.taus else DEFAULT_TAUS
    twins = protocol_twins(model, corpus, args.twins, args.seed)
    ext = train_feature_extractor(corpus["train"], seed=args.seed)
    risk = membership_curve(ext, corpus, twins, taus)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau", "f1"])
        for t, f in sorted(risk.items()):
            w.writerow([repr(t), repr(f)])
    _echo(out)


def cmd_sweep(args):
    from .data import load_corpus
    from .trainer import threshold_sweep

    reports = threshold_sweep(_config(args), _floats(args.l), load_corpus(args.manifest),
                              args.out, args.twins)
    out = Path(args.out)
    _echo(out / "sweep.csv", *(r.write(out / f"report_l_{l:g}.json") for l, r in reports.items()))


def cmd_ablate(args):
    from .data import load_corpus
    from .trainer import ablation_run

    names = [n.strip() for n in args.runs.split(",") if n.strip()]
    ablation_run(_config(args), names, load_corpus(args.manifest), args.out, args.twins)
    _echo(Path(args.out) / "ablation.csv")


def cmd_plot(args):
    from .plotting import plot_leads
    from .recordio import read_record

    leads = [s.strip() for s in args.leads.split(",")]
    _echo(*plot_leads(read_record(args.record), args.out, leads))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lavq", description="Language-guided ECG digital twin editor.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="command")
    sub.required = True

    def training_opts(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="config override, applied after --config (repeatable)")
        sp.add_argument("--desk", action="store_true", help="start from the desk-scale preset")

    s = sub.add_parser("gen-data", help="synthesize the desk corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--raw", action="store_true", help="skip preprocessing (500 Hz, 10 s)")
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("preprocess", help="segment, resample and normalize a corpus")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_preprocess)

    s = sub.add_parser("train", help="train the editor")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    training_opts(s)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("twin", help="generate a digital twin for a pre/reference pair")
    s.add_argument("--pre", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_twin)

    for name, fn, helptext in (("eval", cmd_eval, "write a JSON metric report"),
                               ("privacy", cmd_privacy, "membership F1 over a tau grid")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--manifest", required=True)
        s.add_argument("--ckpt", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--twins", type=int, default=10, help="twins per experimental normal")
        s.add_argument("--seed", type=int, default=0)
        if name == "privacy":
            s.add_argument("--taus", help="comma-separated tau values")
        s.set_defaults(fn=fn)

    s = sub.add_parser("sweep", help="train and evaluate per threshold l")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--l", default="0.3,0.5,0.7")
    s.add_argument("--twins", type=int, default=10)
    training_opts(s)
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("ablate", help="train and evaluate loss/VQ ablations")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--runs", default="full,no_rec")
    s.add_argument("--twins", type=int, default=10)
    training_opts(s)
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("plot", help="SVG of selected leads plus CSV sidecar")
    s.add_argument("--record", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--leads", default="I,aVR,V3")
    s.set_defaults(fn=cmd_plot)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (ValidationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
