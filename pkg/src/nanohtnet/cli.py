"""Command-line entry point: ``nanohtnet <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 corrupt dataset or checkpoint.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import datagen, poseclr, train as trainer
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, CorruptFileError, TrainingError
from .model import DESK, FLAGSHIP, LARGE, ModelConfig, accounting_report, as_tensors, forward, init_params
from .skeleton import build_h36m17
from .tensor import Tensor

logger = logging.getLogger("nanohtnet")

PRESETS = {"flagship": FLAGSHIP, "large": LARGE, "desk": DESK}


def load_json_config(arg: Optional[str]) -> dict:
    """``--config`` accepts a path to a JSON file or an inline JSON object."""
    if not arg:
        return {}
    text = arg if arg.lstrip().startswith("{") else _read_text(arg)
    try:
        out = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(out, dict):
        raise ConfigError("config must be a JSON object")
    return out


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _require_file(path: Optional[str], what: str) -> str:
    if not path:
        raise ConfigError(f"--{what} is required")
    if not Path(path).is_file():
        raise ConfigError(f"{what} file not found: {path}")
    return path


def _emit(obj, out: Optional[str]) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> None:
    conf = load_json_config(args.config)
    n = int(conf.pop("sequences", args.sequences))
    frames = int(conf.pop("frames", args.frames))
    views = int(conf.pop("views", args.views))
    conf.pop("seed", None)
    known = set(datagen.SyntheticMotionConfig.__dataclass_fields__) - {"seed", "frames"}
    extra = set(conf) - known
    if extra:
        raise ConfigError(f"unknown generator keys: {sorted(extra)}")
    for key in ("freq_band", "amp_band"):
        if key in conf:
            conf[key] = tuple(conf[key])
    if conf.get("action") not in (None, *datagen.ACTION_PRESETS):
        raise ConfigError(f"unknown action {conf['action']!r}")
    seqs = datagen.generate_dataset(n, frames, seed=args.seed, views=views, **conf)
    out = args.out or "dataset.pseq"
    datagen.write_dataset(out, seqs)
    print(json.dumps({"out": out, "sequences": n, "frames": frames, "views": views}))


def _model_config(conf: dict, default: ModelConfig) -> ModelConfig:
    preset = conf.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        default = PRESETS[preset]
    return ModelConfig.from_dict({**default.to_dict(), **conf})


def cmd_pretrain(args) -> None:
    conf = load_json_config(args.config)
    mcfg = _model_config(conf.pop("model", {}), trainer.TrainConfig().model)
    pcfg = poseclr.PretrainConfig.from_dict(conf.pop("pretrain", conf))
    seqs = datagen.read_dataset(_require_file(args.data, "data"), build_h36m17())
    out = Path(args.out or "pretrain")
    out.mkdir(parents=True, exist_ok=True)
    res = poseclr.pretrain(pcfg, mcfg, seqs, seed=args.seed, log_path=out / "pretrain_log.jsonl")
    names = poseclr.export_encoder(res.pair, mcfg, out / "encoder.ckpt")
    print(json.dumps({"encoder": str(out / "encoder.ckpt"), "tensors": len(names),
                      "final": res.history[-1]}, sort_keys=True))


def cmd_train(args) -> None:
    conf = load_json_config(args.config)
    conf["model"] = _model_config(dict(conf.get("model", {})), trainer.TrainConfig().model).to_dict()
    for key, val in (("dataset", args.data), ("eval_dataset", args.eval_data),
                     ("pretrained", args.pretrained), ("epochs", args.epochs)):
        if val is not None:
            conf[key] = val
    conf["seed"] = args.seed
    conf["out_dir"] = args.out or conf.get("out_dir") or "run"
    cfg = trainer.TrainConfig.from_dict(conf)
    _require_file(cfg.dataset, "data")
    if cfg.eval_dataset:
        _require_file(cfg.eval_dataset, "eval-data")
    if cfg.pretrained:
        _require_file(cfg.pretrained, "pretrained")
    report = trainer.train(cfg)
    Path(cfg.out_dir, "report.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True))
    save_checkpoint(report.params, cfg.model, Path(cfg.out_dir) / "last.ckpt")
    print(json.dumps({"best_epoch": report.best_epoch, "best_mpjpe": report.best_mpjpe,
                      "baseline_mpjpe": report.baseline_mpjpe}, sort_keys=True))


def _load_model(path: str):
    params, cfg, _ = load_checkpoint(_require_file(path, "checkpoint"))
    if cfg is None:
        raise ConfigError(f"{path} carries no model config")
    missing = [k for k in init_params(cfg) if k not in params]
    if missing:
        raise ConfigError(f"{path} lacks tensors {missing[:3]}... (an encoder export is not a full model)")
    return params, cfg


def cmd_eval(args) -> None:
    params, cfg = _load_model(args.checkpoint)
    seqs = datagen.read_dataset(_require_file(args.data, "data"), build_h36m17())
    report = trainer.evaluate(params, cfg, seqs, stride=args.stride)
    _emit(report, args.out)


def cmd_flops(args) -> None:
    conf = load_json_config(args.config)
    cfg = _model_config(conf, PRESETS[args.preset])
    _emit(accounting_report(cfg), args.out)


def cmd_bench(args) -> None:
    if args.checkpoint:
        params, cfg = _load_model(args.checkpoint)
    else:
        cfg = _model_config(load_json_config(args.config), PRESETS[args.preset])
        params = init_params(cfg, args.seed)
    out = {"model": cfg.to_dict(),
           "latency": [trainer.bench(params, cfg, b, args.iterations, seed=args.seed)
                       for b in args.batch]}
    if args.tokenization:
        out["tokenization"] = trainer.bench_tokenization(cfg, iterations=args.iterations)
    _emit(out, args.out)


def cmd_dump_attn(args) -> None:
    params, cfg = _load_model(args.checkpoint)
    if args.data:
        seq = datagen.read_dataset(args.data, build_h36m17())[args.sequence]
        x = seq.poses2d[args.view, args.start:args.start + cfg.rf]
        if len(x) < cfg.rf:
            raise ConfigError("window runs past the end of the sequence")
    else:
        x = np.random.default_rng(args.seed).normal(0.0, 0.3, size=(cfg.rf, cfg.joints, 2))
    trace: dict = {}
    forward(as_tensors(params), Tensor(np.asarray(x, dtype=np.float32)), cfg, trace=trace)
    _emit({k: np.asarray(v).tolist() for k, v in trace.items()}, args.out)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nanohtnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file or inline JSON object")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="output path")
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", cmd_gen_data, "write a synthetic PSEQ1 dataset")
    p.add_argument("--sequences", type=int, default=10)
    p.add_argument("--frames", type=int, default=300)
    p.add_argument("--views", type=int, default=4)

    p = add("pretrain", cmd_pretrain, "multi-view contrastive pre-training; exports the encoder")
    p.add_argument("--data")

    p = add("train", cmd_train, "fine-tune a lifting model")
    p.add_argument("--data")
    p.add_argument("--eval-data")
    p.add_argument("--pretrained")
    p.add_argument("--epochs", type=int)

    p = add("eval", cmd_eval, "MPJPE / P-MPJPE report for a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--stride", type=int, default=1)

    p = add("flops", cmd_flops, "parameter and FLOP accounting")
    p.add_argument("--preset", choices=sorted(PRESETS), default="flagship")

    p = add("bench", cmd_bench, "inference latency and throughput")
    p.add_argument("--checkpoint")
    p.add_argument("--preset", choices=sorted(PRESETS), default="flagship")
    p.add_argument("--batch", type=int, nargs="+", default=[1])
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--tokenization", action="store_true", help="also time ETST vs DTST attention")

    p = add("dump-attn", cmd_dump_attn, "dump attention maps of one window as JSON")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--sequence", type=int, default=0)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--start", type=int, default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CorruptFileError as exc:
        print(f"corrupt file: {exc}", file=sys.stderr)
        return 3
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
