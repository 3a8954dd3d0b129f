#!/usr/bin/env python3
"""Run the full desk pipeline through the CLI.

synth -> train-tokenizer -> pretrain -> finetune (pretrained and from
scratch) -> eval, all driven by one config file. Pre-training uses the
config's two-way split; fine-tuning re-splits recordings three ways so a
held-out test part exists.

    python3 scripts/run_desk_pipeline.py configs/smoke.cfg
    python3 scripts/run_desk_pipeline.py configs/desk.cfg --skip-synth
"""
import argparse
import sys
from pathlib import Path

from neurocodec.cli import RunConfig, run

FINETUNE_SPLIT = ["--set", "data.split=0.6,0.2,0.2", "--set", "data.split_seed=1"]


def step(argv):
    print("$ neurocodec " + " ".join(argv), flush=True)
    code = run(argv)
    if code:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--skip-synth", action="store_true", help="reuse an existing data.dir")
    args = ap.parse_args()

    cfg_path = str(Path(args.config).resolve())
    cfg = RunConfig.load(cfg_path)
    data = cfg.get("data.dir")
    ckpt = Path(cfg.get("finetune.ckpt"))
    scratch = ckpt.with_name(ckpt.stem + "_scratch" + ckpt.suffix)
    scratch_csv = Path(cfg.get("finetune.csv")).with_name("finetune_scratch.csv")

    base = ["--config", cfg_path]
    if not args.skip_synth:
        step(["synth", *base, "--out", data])
    step(["train-tokenizer", *base])
    step(["pretrain", *base])
    step(["finetune", *base, *FINETUNE_SPLIT, "--ckpt", cfg.get("pretrain.ckpt")])
    step(["finetune", *base, *FINETUNE_SPLIT, "--set", f"finetune.ckpt={scratch}",
          "--set", f"finetune.csv={scratch_csv}"])
    for model in (ckpt, scratch):
        step(["eval", "--ckpt", str(model), "--data", data,
              "--out", str(model.with_name(model.stem + "_eval.csv"))])


if __name__ == "__main__":
    main()
