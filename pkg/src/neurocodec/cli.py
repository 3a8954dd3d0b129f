"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerics error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import PRESETS, ModelConfig, format_value, parse_value, preset
from .errors import ConfigError, DataError, NumericsError
from .finetune import FinetuneConfig, TaskSpec, parse_task_file
from .synth import SynthConfig
from .train import PretrainConfig, TokenizerTrainConfig

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICS = 0, 1, 2, 3

PATH_KEYS = {"dir", "csv", "ckpt", "task"}


def _fields(cls, skip=()) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        out[f.name] = (f.type, default)
    return out


def _schema() -> dict[str, dict[str, tuple]]:
    model = {"preset": ("str", "tiny")}
    model.update({k: v for k, v in _fields(ModelConfig, skip=("conv",)).items()})
    return {
        "run": {"seed": ("int", 0), "threads": ("int", 1)},
        "synth": _fields(SynthConfig, skip=("seed",)),
        "data": {"dir": ("str", "data"), "window": ("int", 800), "stride": ("int", 800),
                 "preprocess": ("bool", True), "lowcut": ("float", 0.1), "highcut": ("float", 75.0),
                 "notch": ("float | None", 50.0), "target_rate": ("float", 200.0),
                 "split": ("tuple[float, ...]", (0.8, 0.2)), "split_seed": ("int", 0)},
        "model": model,
        "tokenizer": {**_fields(TokenizerTrainConfig, skip=("seed",)),
                      "csv": ("str", "tokenizer.csv"), "ckpt": ("str", "tokenizer.lbrm")},
        "pretrain": {**_fields(PretrainConfig, skip=("seed",)), "csv": ("str", "pretrain.csv"),
                     "ckpt": ("str", "pretrain.lbrm"), "checkpoint_every": ("int", 0)},
        "finetune": {**_fields(FinetuneConfig, skip=("seed",)), "csv": ("str", "finetune.csv"),
                     "ckpt": ("str", "finetune.lbrm"), "task": ("str", "")},
    }


SCHEMA = _schema()


class RunConfig:
    """Flat key=value configuration with dotted sections.

    Model keys default to the chosen preset's values. Path-valued keys
    (``*.dir``, ``*.csv``, ``*.ckpt``, ``*.task``) resolve relative to
    the config file.
    """

    def __init__(self, values: dict[str, str] | None = None, base: Path | None = None):
        self.explicit: dict[str, str] = {}
        self.base = base or Path.cwd()
        for k, v in (values or {}).items():
            self.set(k, v)

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} not found")
        values = {}
        for n, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            k, sep, v = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{n}: expected key=value, got {raw.strip()!r}")
            values[k.strip()] = v.strip()
        return cls(values, p.resolve().parent)

    def set(self, key: str, value: str) -> None:
        section, _, name = key.partition(".")
        if section not in SCHEMA or name not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {key!r}")
        parse_value(SCHEMA[section][name][0], value)  # validate early
        self.explicit[key] = value

    def get(self, key: str):
        section, _, name = key.partition(".")
        typ, default = SCHEMA[section][name]
        if key in self.explicit:
            value = parse_value(typ, self.explicit[key])
        elif section == "model" and name != "preset":
            value = getattr(preset(self.get("model.preset")), name)
        else:
            value = default
        if name in PATH_KEYS and value:
            value = str((self.base / value).resolve())
        return value

    def section(self, name: str) -> dict:
        return {k: self.get(f"{name}.{k}") for k in SCHEMA[name]}

    def effective(self) -> dict[str, str]:
        """Every key with its effective value, as written (paths unresolved)."""
        out = {}
        for section, keys in SCHEMA.items():
            for k, (typ, default) in keys.items():
                key = f"{section}.{k}"
                if key in self.explicit:
                    out[key] = self.explicit[key]
                elif k not in PATH_KEYS:
                    out[key] = format_value(self.get(key))
                else:
                    out[key] = format_value(default)
        return out

    def digest(self) -> str:
        text = "".join(f"{k}={v}\n" for k, v in sorted(self.effective().items()))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    # typed views

    def model(self) -> ModelConfig:
        name = self.get("model.preset")
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        over = {k: self.get(f"model.{k}") for k in SCHEMA["model"] if k != "preset"
                and f"model.{k}" in self.explicit}
        return preset(name, **over)

    def _dc(self, cls, section):
        kw = {k: v for k, v in self.section(section).items() if k in {f.name for f in dataclasses.fields(cls)}}
        return cls(**kw)

    def synth(self) -> SynthConfig:
        return SynthConfig(**{**self.section("synth"), "seed": self.get("run.seed")})

    def tokenizer(self) -> TokenizerTrainConfig:
        return dataclasses.replace(self._dc(TokenizerTrainConfig, "tokenizer"), seed=self.get("run.seed"))

    def pretrain(self) -> PretrainConfig:
        return dataclasses.replace(self._dc(PretrainConfig, "pretrain"), seed=self.get("run.seed"))

    def finetune(self) -> FinetuneConfig:
        return dataclasses.replace(self._dc(FinetuneConfig, "finetune"), seed=self.get("run.seed"))


# reproducibility header


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def inputs_hash(paths) -> str:
    """Git-style tree hash over input files (name and blob hash, sorted by name)."""
    entries = []
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.iterdir() if q.is_file()) if p.is_dir() else [p]
        for q in files:
            entries.append(f"{q.name} {git_blob_hash(q.read_bytes())}\n")
    return hashlib.sha1("".join(sorted(entries)).encode("utf-8")).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, rows: list[dict], header: dict[str, str], columns=None) -> None:
    columns = columns or (list(rows[0]) if rows else [])
    buf = io.StringIO()
    for k, v in header.items():
        buf.write(f"# {k}={v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def repro_header(command: str, cfg: RunConfig | None, inputs, seeds: dict) -> dict[str, str]:
    return {"neurocodec": f"{__version__} {command}",
            "config_sha256": cfg.digest() if cfg else "none",
            "seeds": ",".join(f"{k}:{v}" for k, v in seeds.items()),
            "inputs_sha1": inputs_hash(inputs) if inputs else "none"}


# pipeline helpers


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} {path} not found")
    return p


def _preprocess_config(cfg: RunConfig):
    from .eegio import PreprocessConfig

    if not cfg.get("data.preprocess"):
        return None
    return PreprocessConfig(lowcut=cfg.get("data.lowcut"), highcut=cfg.get("data.highcut"),
                            notch=cfg.get("data.notch"), target_rate=cfg.get("data.target_rate"))


def _load_items(data_dir, window, stride, patch_w, pre, targets):
    from .data import build_items, read_dataset

    labeled = read_dataset(_require(data_dir, "data directory"))
    if not labeled:
        raise DataError(f"{data_dir}: dataset is empty")
    items = build_items(labeled, window, stride, patch_w, pre, targets)
    if not items:
        raise DataError(f"{data_dir}: no windows of {window} samples")
    return items


def _items(cfg: RunConfig, model_cfg: ModelConfig, targets=False):
    return _load_items(cfg.get("data.dir"), cfg.get("data.window"), cfg.get("data.stride"),
                       model_cfg.patch_w, _preprocess_config(cfg), targets)


def _split_items(cfg: RunConfig, items):
    from .synth import split

    sp = split([it.rec_id for it in items], cfg.get("data.split"), cfg.get("data.split_seed"))
    return [[items[i] for i in part] for part in sp.parts().values()]


def _print_rows(log):
    def emit(row):
        log(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return emit


# subcommands


def cmd_synth(args, log) -> int:
    from .data import write_dataset
    from .synth import synth_generate

    cfg = _config(args)
    scfg = cfg.synth()
    paths = write_dataset(args.out, synth_generate(scfg))
    log(f"wrote {len(paths)} recordings to {args.out}")
    return EXIT_OK


def cmd_inspect(args, log) -> int:
    from .eegio import read_header

    fields, _ = read_header(_require(args.file, "recording"))
    log(f"version={fields['version']}")
    log(f"channels={fields['channels']}")
    log(f"rate_hz={fields['rate_hz']!r}")
    log(f"samples={fields['samples']}")
    log(f"labels={','.join(fields['labels'])}")
    for k, v in fields["meta"].items():
        log(f"meta.{k}={v}")
    return EXIT_OK


def cmd_describe(args, log) -> int:
    from .checkpoint import describe

    for line in describe(_require(args.file, "checkpoint")):
        log(line)
    return EXIT_OK


def cmd_spectrum(args, log) -> int:
    from .eegio import Sample, patchify, preprocess, read_recording
    from .spectrum import amp_phase, dft

    rec = read_recording(_require(args.file, "recording"))
    if args.preprocess:
        rec = preprocess(rec)
    w = args.patch_w
    n = rec.n_samples // w
    if n < 1:
        raise DataError(f"{args.file}: {rec.n_samples} samples is shorter than one patch of {w}")
    grid = patchify(Sample(list(rec.channels), rec.data[:, : n * w], (rec.id, 0)), w)
    amp, phase = amp_phase(dft(grid.patches.astype(np.float64)))
    rows = []
    for i in range(grid.n_patches):
        ch = rec.channels[i // grid.n_times].name
        for b in range(amp.shape[1]):
            rows.append({"channel": ch, "time": int(grid.time_idx[i]), "bin": b,
                         "freq_hz": b * rec.rate_hz / w, "amplitude": float(amp[i, b]),
                         "phase": float(phase[i, b])})
    write_csv(args.out, rows, repro_header("spectrum", None, [args.file], {}))
    log(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def cmd_train_tokenizer(args, log) -> int:
    from .checkpoint import save_model
    from .tokenizer import Tokenizer
    from .train import train_tokenizer

    cfg = _config(args)
    mcfg, tcfg = cfg.model(), cfg.tokenizer()
    items = _items(cfg, mcfg, targets=True)
    torch.manual_seed(tcfg.seed)
    model = Tokenizer(mcfg, seed=tcfg.seed).to(mcfg.dtype)
    rows = train_tokenizer(model, items, tcfg, log=_print_rows(log))
    save_model(cfg.get("tokenizer.ckpt"), model, "tokenizer", {"seed": tcfg.seed})
    write_csv(cfg.get("tokenizer.csv"), rows,
              repro_header("train-tokenizer", cfg, [cfg.get("data.dir")], {"run": tcfg.seed}))
    return EXIT_OK


def cmd_pretrain(args, log) -> int:
    from .checkpoint import load_model, save_model
    from .pretrain import MEMModel
    from .train import pretrain

    cfg = _config(args)
    tok_path = args.tokenizer_ckpt or cfg.get("tokenizer.ckpt")
    tokenizer, meta = load_model(_require(tok_path, "tokenizer checkpoint"))
    if meta.get("kind") != "tokenizer":
        raise ConfigError(f"{tok_path} holds a {meta.get('kind')} checkpoint, not a tokenizer")
    mcfg, pcfg = cfg.model(), cfg.pretrain()
    if mcfg.codebook_size != tokenizer.cfg.codebook_size:
        raise ConfigError(f"model.codebook_size={mcfg.codebook_size} but the tokenizer has "
                          f"{tokenizer.cfg.codebook_size} codes")
    tokenizer = tokenizer.to(mcfg.dtype)
    items = _items(cfg, mcfg)
    parts = _split_items(cfg, items)
    train, valid = parts[0], parts[1]
    torch.manual_seed(pcfg.seed)
    model = MEMModel(mcfg).to(mcfg.dtype)
    ckpt, every = Path(cfg.get("pretrain.ckpt")), cfg.get("pretrain.checkpoint_every")

    def on_epoch(epoch, opt):
        if every and epoch % every == 0:
            save_model(ckpt.with_name(f"{ckpt.stem}-e{epoch:03d}{ckpt.suffix}"), model, "mem",
                       {"epoch": epoch, "seed": pcfg.seed}, optimizer=opt)

    rows = pretrain(model, tokenizer, train, pcfg, valid_items=valid or None,
                    log=_print_rows(log), on_epoch=on_epoch)
    save_model(ckpt, model, "mem", {"epoch": pcfg.epochs, "seed": pcfg.seed})
    cols = ["epoch", "loss", "loss_mem", "loss_sym", "mem_accuracy", "lr"]
    if valid:
        cols.append("valid_mem_accuracy")
    write_csv(cfg.get("pretrain.csv"), rows,
              repro_header("pretrain", cfg, [cfg.get("data.dir"), tok_path], {"run": pcfg.seed}), cols)
    return EXIT_OK


def _task_meta(task: TaskSpec, cfg: RunConfig, mcfg: ModelConfig) -> dict:
    return {"n_out": task.n_out, "task.kind": task.kind, "task.angle_norm": task.angle_norm,
            "task.label_smoothing": task.label_smoothing, "data.window": cfg.get("data.window"),
            "data.stride": cfg.get("data.stride"), "data.preprocess": cfg.get("data.preprocess")}


def cmd_finetune(args, log) -> int:
    from .checkpoint import load_model, save_model
    from .finetune import finetune
    from .metrics import format_table
    from .model import Classifier

    cfg = _config(args)
    task_path = args.task or cfg.get("finetune.task")
    if not task_path:
        raise ConfigError("no task spec: pass --task or set finetune.task")
    task, freeze = parse_task_file(task_path)
    fcfg = cfg.finetune()
    torch.manual_seed(fcfg.seed)
    inputs = [cfg.get("data.dir"), task_path]
    if args.ckpt:
        src, meta = load_model(_require(args.ckpt, "checkpoint"))
        inputs.append(args.ckpt)
        kind = meta.get("kind")
        if kind == "mem":
            model = Classifier.from_backbone(src.backbone, task.n_out)
        elif kind == "classifier":
            if src.n_out != task.n_out:
                raise ConfigError(f"checkpoint head has {src.n_out} outputs, task needs {task.n_out}")
            model = src
        else:
            raise ConfigError(f"cannot fine-tune from a {kind} checkpoint")
        mcfg = model.cfg
    else:
        mcfg = cfg.model()
        model = Classifier(mcfg, task.n_out).to(mcfg.dtype)
    items = _items(cfg, mcfg)
    parts = _split_items(cfg, items)
    train, valid = parts[0], parts[1]
    test = parts[2] if len(parts) > 2 else []
    if not valid:
        raise ConfigError("fine-tuning needs a validation split (data.split with two or more parts)")
    res = finetune(model, train, valid, task, freeze, fcfg, test_items=test or None, log=_print_rows(log))
    save_model(cfg.get("finetune.ckpt"), res.model, "classifier",
               {**_task_meta(task, cfg, mcfg), "best_epoch": res.best_epoch, "seed": fcfg.seed})
    rows = list(res.history)
    for r in rows:
        r["best"] = int(r["epoch"] == res.best_epoch)
    write_csv(cfg.get("finetune.csv"), rows,
              repro_header("finetune", cfg, inputs, {"run": fcfg.seed}))
    log(f"best_epoch={res.best_epoch} valid_{task.monitor}={res.best_valid:.6g}")
    if res.test:
        log(format_table(res.test))
    return EXIT_OK


def cmd_eval(args, log) -> int:
    from .checkpoint import load_model
    from .data import eval_batches
    from .eegio import PreprocessConfig
    from .finetune import evaluate
    from .metrics import format_table

    model, meta = load_model(_require(args.ckpt, "checkpoint"))
    if meta.get("kind") != "classifier":
        raise ConfigError(f"eval needs a fine-tuned classifier checkpoint, got {meta.get('kind')}")
    task = TaskSpec(meta["task.kind"], int(meta["n_out"]),
                    label_smoothing=float(meta.get("task.label_smoothing", 0.1)),
                    angle_norm=meta.get("task.angle_norm") == "True")
    window = int(meta.get("data.window", 800))
    stride = int(meta.get("data.stride", window))
    pre = PreprocessConfig() if meta.get("data.preprocess", "True") == "True" else None
    items = _load_items(args.data, window, stride, model.cfg.patch_w, pre, targets=False)
    metrics = evaluate(model, eval_batches(items, args.batch_size, model.cfg.dtype), task)
    log(format_table(metrics))
    rows = [{"metric": k, "value": float(v)} for k, v in metrics.items()]
    write_csv(args.out, rows, repro_header("eval", None, [args.data, args.ckpt], {}))
    return EXIT_OK


def cmd_defaults(args, log) -> int:
    cfg = RunConfig()
    for k, v in cfg.effective().items():
        log(f"{k}={v}")
    return EXIT_OK


def _config(args) -> RunConfig:
    if not getattr(args, "config", None):
        raise ConfigError("--config is required")
    cfg = RunConfig.load(args.config)
    for kv in getattr(args, "set", None) or []:
        k, sep, v = kv.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {kv!r}")
        cfg.set(k.strip(), v.strip())
    if getattr(args, "seed", None) is not None:
        cfg.set("run.seed", str(args.seed))
    if getattr(args, "precision", None):
        cfg.set("model.precision", args.precision)
    if getattr(args, "threads", None):
        cfg.set("run.threads", str(args.threads))
    torch.set_num_threads(cfg.get("run.threads"))
    return cfg


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed (run.seed)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="torch worker threads")
    common.add_argument("--precision", choices=("f32", "f64"), default=argparse.SUPPRESS)

    p = _Parser(prog="neurocodec", parents=[common], description="EEG tokenizer and foundation-model toolkit")
    p.add_argument("--version", action="version", version=f"neurocodec {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_text, config=False):
        sp = sub.add_parser(name, parents=[common], help=help_text)
        if config:
            sp.add_argument("--config", required=True, help="key=value run config")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("synth", cmd_synth, "generate a synthetic labeled corpus", config=True)
    sp.add_argument("--out", required=True, help="output dataset directory")
    add("train-tokenizer", cmd_train_tokenizer, "train the vector-quantized tokenizer", config=True)
    sp = add("pretrain", cmd_pretrain, "masked EEG modeling pre-training", config=True)
    sp.add_argument("--tokenizer-ckpt", help="trained tokenizer (defaults to tokenizer.ckpt)")
    sp = add("finetune", cmd_finetune, "fine-tune on a labeled task", config=True)
    sp.add_argument("--ckpt", help="pretrained (mem) or classifier checkpoint; omit to train from scratch")
    sp.add_argument("--task", help="task spec file (kind, classes, loss, monitor, freeze)")
    sp = add("eval", cmd_eval, "evaluate a classifier checkpoint on a dataset")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True, help="dataset directory with labels.csv")
    sp.add_argument("--out", default="eval.csv", help="metrics CSV path")
    sp.add_argument("--batch-size", type=int, default=256)
    sp = add("inspect", cmd_inspect, "print an EEGR header")
    sp.add_argument("file")
    sp = add("describe-ckpt", cmd_describe, "print checkpoint config and tensor table")
    sp.add_argument("file")
    sp = add("spectrum", cmd_spectrum, "dump per-patch amplitude and phase spectra")
    sp.add_argument("file")
    sp.add_argument("--out", required=True)
    sp.add_argument("--patch-w", type=int, default=200)
    sp.add_argument("--preprocess", action="store_true", help="filter, resample and scale first")
    add("defaults", cmd_defaults, "print every config key with its default")
    return p


def run(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr

    def log(msg):
        print(msg, file=out, flush=True)

    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "command", None):
            raise ConfigError("no subcommand given; see neurocodec --help")
        if getattr(args, "threads", None):
            torch.set_num_threads(args.threads)
        return args.fn(args, log)
    except ConfigError as e:
        print(f"config error: {e}", file=err)
        return EXIT_CONFIG
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=err)
        return EXIT_DATA
    except NumericsError as e:
        print(f"numerics error: {e}", file=err)
        return EXIT_NUMERICS


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
