"""``freqnet`` command line: synth, train, eval, spectrum, hfri, params, cam.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 data contract violation.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as C
from . import data as D
from . import freq
from . import model as M
from . import train as TR
from . import tensor as T

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DATA = 0, 1, 2, 3

log = logging.getLogger("freqnet")


class UsageError(Exception):
    pass


@dataclasses.dataclass(frozen=True)
class RunSettings:
    preset: str = "desk"
    threads: int = 1


@dataclasses.dataclass(frozen=True)
class RunConfig:
    run: RunSettings
    model: M.ModelConfig
    train: TR.TrainConfig

    def lines(self) -> list:
        return [*C.to_lines(self.run, "run"), *C.to_lines(self.model, "model"), *C.to_lines(self.train, "train")]

    def text(self) -> str:
        return "\n".join(self.lines()) + "\n"


def preset_defaults(preset: str) -> tuple:
    if preset == "desk":
        return M.DESK_MODEL, TR.DESK
    if preset == "paper":
        return M.ModelConfig(), TR.PAPER
    raise C.ConfigError(f"unknown preset {preset!r} (expected desk or paper)")


def resolve_config(config_path=None, overrides=(), preset=None, seed=None, threads=None) -> RunConfig:
    """Merge preset defaults, the config file, ``--set`` pairs, then dedicated flags."""
    pairs = C.read_pairs(config_path) if config_path else []
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise C.ConfigError(f"--set expects section.key=value, got {item!r}")
        pairs.append((key.strip(), value.strip()))
    for key, _ in pairs:
        if key.partition(".")[0] not in ("run", "model", "train"):
            raise C.ConfigError(f"unknown config section in {key!r}")
    run = C.apply_pairs(RunSettings(), "run", pairs)
    if preset is not None:
        run = dataclasses.replace(run, preset=preset)
    if threads is not None:
        run = dataclasses.replace(run, threads=threads)
    model_cfg, train_cfg = preset_defaults(run.preset)
    model_cfg = C.apply_pairs(model_cfg, "model", pairs)
    train_cfg = C.apply_pairs(train_cfg, "train", pairs)
    if seed is not None:
        model_cfg = dataclasses.replace(model_cfg, seed=seed)
        train_cfg = dataclasses.replace(train_cfg, seed=seed)
    try:
        train_cfg.validate()
    except ValueError as exc:
        raise C.ConfigError(str(exc)) from exc
    return RunConfig(run, model_cfg.validate(), train_cfg)


# -- commands ------------------------------------------------------------------------------

def cmd_synth(args) -> int:
    try:
        man = D.synth_corpus(args.out, args.n, args.size, args.seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: cannot write corpus to {args.out}: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {len(man.records)} images to {args.out}")
    return EXIT_OK


def _load(data_dir, size):
    man = D.load_corpus(data_dir)
    for path, reason in man.rejects:
        print(f"warning: rejected {path}: {reason}", file=sys.stderr)
    return man, D.load_dataset(man, size)


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.set, args.preset, args.seed, args.threads)
    out = Path(args.out)
    try:
        man, ds = _load(args.data, cfg.model.input_size)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except D.DecodeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if set(np.unique(ds.labels).tolist()) != {0, 1}:
        print(f"error: corpus {args.data} holds a single class {man.counts()}; refusing to train",
              file=sys.stderr)
        return EXIT_DATA
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.text(), encoding="utf-8")
    except OSError as exc:
        print(f"error: cannot write to {out}: {exc}", file=sys.stderr)
        return EXIT_IO
    with threadpool_limits(cfg.run.threads):
        net = M.build_model(cfg.model)
        with open(out / "metrics.csv", "w", encoding="utf-8") as fh:
            fh.write("# epoch,lr,loss,train_acc\n")

            def on_epoch(entry):
                fh.write(entry.line() + "\n")
                fh.flush()
                print(entry.line())

            t0 = time.time()
            try:
                TR.train(net, ds, cfg.train, on_epoch)
            except TR.DataContractError as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_DATA
            fh.write(f"# finished {time.strftime('%Y-%m-%dT%H:%M:%S')} in {time.time() - t0:.1f}s\n")
        M.save_checkpoint(net, out / "checkpoint")
    print(f"checkpoint written to {out / 'checkpoint'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        net = M.load_checkpoint(args.ckpt)
    except (FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        _, ds = _load(args.data, net.cfg.input_size)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    if len(ds) == 0:
        print(f"error: corpus {args.data} is empty", file=sys.stderr)
        return EXIT_DATA
    with threadpool_limits(args.threads or 1):
        report = TR.evaluate(net, ds)
    text = report.to_text()
    sys.stdout.write(text)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "report.txt").write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_spectrum(args) -> int:
    label = {"real": 0, "fake": 1}[args.cls]
    try:
        man = D.load_corpus(args.data)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    if not man.select(label):
        print(f"error: no {args.cls} images in {args.data}", file=sys.stderr)
        return EXIT_DATA
    spec = D.mean_spectrum(man, args.n, args.size, label)
    tpath, ppath = spec.save(args.out, f"spectrum_{args.cls}")
    print(f"averaged {spec.count} images -> {tpath}, {ppath}")
    for off in D.replica_offsets(args.size):
        print(f"peak_ratio{off} = {D.peak_ratio(spec.grid, off):.4f}")
    return EXIT_OK


def cmd_hfri(args) -> int:
    try:
        px = D.read_pixels(args.image)
    except (FileNotFoundError, D.DecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    img = px.astype(np.float64).transpose(2, 0, 1) / 255.0
    if args.size:
        img = D.decode_image(args.image, args.size).astype(np.float64)
    res = freq.hfri(img[None])[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    T.save_tensor(out / "hfri.fqt", res)
    # residual is signed; the preview shows |x_h| clipped to [0, 1]
    D.write_png(out / "hfri.png", np.abs(res))
    print(f"max |x_h| = {np.abs(res).max():.6g}")
    return EXIT_OK


def cmd_params(args) -> int:
    pairs = list(args.set)
    preset = args.preset or "paper"
    cfg = resolve_config(args.config, pairs, preset)
    print(M.param_count(M.build_model(cfg.model)))
    return EXIT_OK


def cmd_cam(args) -> int:
    try:
        net = M.load_checkpoint(args.ckpt)
        img = D.decode_image(args.image, net.cfg.input_size)
    except (FileNotFoundError, NotADirectoryError, D.DecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    heat = M.cam(net, img)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    D.write_png(out / "cam.png", heat)
    T.save_tensor(out / "cam.fqt", heat)
    print(f"cam written to {out / 'cam.png'}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="freqnet", description="Frequency-domain deepfake detection toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_threads(sp):
        sp.add_argument("--threads", type=int, default=None, help="BLAS/FFT worker count (default 1)")
        return sp

    s = with_threads(sub.add_parser("synth", help="write a synthetic real/fake corpus"))
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=400, help="images per class")
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--seed", type=int, default=7)
    s.set_defaults(func=cmd_synth)

    s = with_threads(sub.add_parser("train", help="train a detector"))
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--preset", choices=("desk", "paper"))
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    s.set_defaults(func=cmd_train)

    s = with_threads(sub.add_parser("eval", help="evaluate a checkpoint"))
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = with_threads(sub.add_parser("spectrum", help="mean log-magnitude spectrum of a class"))
    s.add_argument("--data", required=True)
    s.add_argument("--class", dest="cls", choices=("real", "fake"), required=True)
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_spectrum)

    s = with_threads(sub.add_parser("hfri", help="export the high-frequency residual of an image"))
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, help="resize/crop to SIZE first")
    s.set_defaults(func=cmd_hfri)

    s = with_threads(sub.add_parser("params", help="print the trainable parameter count"))
    s.add_argument("--config")
    s.add_argument("--preset", choices=("desk", "paper"))
    s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    s.set_defaults(func=cmd_params)

    s = with_threads(sub.add_parser("cam", help="class activation map of one image"))
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_cam)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="# %(asctime)s %(name)s %(message)s")
    limit = threadpool_limits(args.threads) if args.threads else nullcontext()
    try:
        with limit:
            return args.func(args)
    except C.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
