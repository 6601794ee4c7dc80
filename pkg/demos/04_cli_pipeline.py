"""The whole command-line pipeline on generated WAV files, in a temporary directory.

Equivalent shell session::

    invvc extract --in wav/src --out feat/src --config cfg.json
    invvc extract --in wav/tgt --out feat/tgt --config cfg.json
    invvc align --src feat/src --tgt feat/tgt --list pairs.txt --out aligned
    invvc train --data aligned --out ckpt --config cfg.json
    invvc convert --ckpt ckpt/final.ivvc --in feat/src --out vc --wav vc_wav
    invvc invert --ckpt ckpt/final.ivvc --in vc --out inv
    invvc eval --mode msd --ref feat/src --hyp inv

    python demos/04_cli_pipeline.py
"""

import json
import tempfile
from pathlib import Path

from invvc.audio import Waveform, write_wav
from invvc.cli import main
from invvc.synthetic import speech_like

with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    for side in ("src", "tgt"):
        (root / "wav" / side).mkdir(parents=True)
    for i in range(3):
        write_wav(root / "wav" / "src" / f"s{i}.wav", Waveform(speech_like(0.6, seed=i)))
        write_wav(root / "wav" / "tgt" / f"t{i}.wav", Waveform(0.5 * speech_like(0.7, seed=20 + i)))
    (root / "pairs.txt").write_text("".join(f"s{i}\tt{i}\n" for i in range(3)))
    (root / "cfg.json").write_text(json.dumps({
        "net": {"n_blocks": 1, "d_h": 16, "block_inner_channels": 32},
        "train": {"crop_length": 30, "batch_size": 3, "max_steps": 100, "checkpoint_every": 50},
    }))

    def run(*argv):
        print(f"\n$ invvc {' '.join(argv)}")
        code = main(list(argv))
        if code:
            raise SystemExit(code)

    cfg = str(root / "cfg.json")
    run("extract", "--in", f"{root}/wav/src", "--out", f"{root}/feat/src", "--config", cfg)
    run("extract", "--in", f"{root}/wav/tgt", "--out", f"{root}/feat/tgt", "--config", cfg)
    run("align", "--src", f"{root}/feat/src", "--tgt", f"{root}/feat/tgt",
        "--list", f"{root}/pairs.txt", "--out", f"{root}/aligned")
    run("train", "--data", f"{root}/aligned", "--out", f"{root}/ckpt", "--config", cfg)
    run("convert", "--ckpt", f"{root}/ckpt/final.ivvc", "--in", f"{root}/feat/src",
        "--out", f"{root}/vc", "--wav", f"{root}/vc_wav", "--gl-iters", "20")
    run("invert", "--ckpt", f"{root}/ckpt/final.ivvc", "--in", f"{root}/vc", "--out", f"{root}/inv")
    run("eval", "--mode", "msd", "--ref", f"{root}/feat/src", "--hyp", f"{root}/inv")
