"""``invvc`` command line: extract -> align -> train -> convert / invert -> eval.

Exit codes: 0 success, 1 usage or configuration, 2 file system, 3 bad file
contents, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import container
from .alignment import align_pair, dtw
from .audio import MelConfig, WavError, griffin_lim_invert, mel_spectrogram, read_wav, write_wav
from .evaluation import (
    PairSet,
    msd_report,
    reference_embedder,
    roundtrip_csv,
    roundtrip_report,
    similarity_csv,
    similarity_suite,
)
from .model import ModelConfig, NetConfig, init_model
from .training import TrainConfig, load_checkpoint, train

EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_NUMERIC = 1, 2, 3, 4


class UsageError(Exception):
    """Bad flags or configuration (exit code 1)."""


class InputMissingError(Exception):
    """A referenced file, directory or id does not exist (exit code 2)."""


# ---------------------------------------------------------------------------
# run configuration


_MODEL_KEYS = ("n_channels", "n_invconv", "n_flows", "coupling_eps")
_DATA_DEFAULTS = {"source_dir": None, "target_dir": None, "pairs_file": None}


@dataclasses.dataclass
class RunConfig:
    mel: MelConfig = dataclasses.field(default_factory=MelConfig)
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    data: dict = dataclasses.field(default_factory=lambda: dict(_DATA_DEFAULTS))

    def to_dict(self) -> dict:
        model = self.model.to_dict()
        net = model.pop("net")
        return {
            "mel": self.mel.to_dict(),
            "model": model,
            "net": net,
            "train": self.train.to_dict(),
            "data": dict(self.data),
        }


def _section_keys() -> dict[str, set[str]]:
    return {
        "mel": {f.name for f in dataclasses.fields(MelConfig)},
        "model": set(_MODEL_KEYS),
        "net": {f.name for f in dataclasses.fields(NetConfig)},
        "train": {f.name for f in dataclasses.fields(TrainConfig)},
        "data": set(_DATA_DEFAULTS),
    }


def parse_run_config(doc: dict) -> RunConfig:
    """Build a :class:`RunConfig`, rejecting unknown sections and keys by dotted name."""
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    allowed = _section_keys()
    for section, body in doc.items():
        if section not in allowed:
            raise UsageError(f"unknown config key '{section}'")
        if not isinstance(body, dict):
            raise UsageError(f"config section '{section}' must be an object")
        for key in body:
            if key not in allowed[section]:
                raise UsageError(f"unknown config key '{section}.{key}'")
    try:
        mel = MelConfig(**doc.get("mel", {}))
        net = NetConfig(**doc.get("net", {}))
        model = ModelConfig(net=net, **doc.get("model", {}))
        train_cfg = TrainConfig(**doc.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    if model.n_channels != mel.n_mels:
        raise UsageError(
            f"model.n_channels={model.n_channels} does not match mel.n_mels={mel.n_mels}"
        )
    data = dict(_DATA_DEFAULTS)
    data.update(doc.get("data", {}))
    for key, value in data.items():
        if value is not None and not Path(value).exists():
            raise InputMissingError(f"data.{key}: {value} does not exist")
    return RunConfig(mel, model, train_cfg, data)


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise InputMissingError(f"config file {path} not found")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path.name}: not valid JSON ({exc})") from None
    return parse_run_config(doc)


# ---------------------------------------------------------------------------
# helpers


def _need_dir(path, what) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise InputMissingError(f"{what} directory {p} not found")
    return p


def _need_file(path, what) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputMissingError(f"{what} {p} not found")
    return p


def _load_tensor(path: Path, name: str) -> np.ndarray:
    try:
        _, tensors = container.load(path)
    except container.ContainerError as exc:
        raise container.ContainerError(f"{path.name}: {exc}") from None
    if name not in tensors:
        raise container.IntegrityError(f"{path.name}: no '{name}' tensor")
    return tensors[name]


def _inputs(path, suffixes) -> list[Path]:
    """A single file, or every matching file of a directory in sorted order."""
    p = Path(path)
    if p.is_dir():
        return sorted(f for f in p.iterdir() if f.suffix.lower() in suffixes)
    if p.is_file():
        return [p]
    raise InputMissingError(f"input {p} not found")


def _out_path(out, src: Path, many: bool, suffix: str) -> Path:
    out = Path(out)
    if many:
        out.mkdir(parents=True, exist_ok=True)
        return out / (src.stem + suffix)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _save_mel(path: Path, mel: np.ndarray, meta: dict) -> None:
    container.save(path, {"kind": "mel", **meta}, {"mel": mel})


# ---------------------------------------------------------------------------
# commands


def cmd_print_config(args) -> int:
    print(json.dumps(RunConfig().to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_extract(args) -> int:
    cfg = load_run_config(args.config)
    in_dir = _need_dir(args.inp, "input")
    out_dir = Path(args.out)
    wavs = sorted(f for f in in_dir.iterdir() if f.suffix.lower() == ".wav")
    if not wavs:
        print(f"0 files: no .wav files in {in_dir}")
        return 0
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = []
    for wav in wavs:
        try:
            mel = mel_spectrogram(read_wav(wav, cfg.mel.sample_rate), cfg.mel)
        except (WavError, ValueError) as exc:
            msg = str(exc)
            failures.append(msg if wav.name in msg else f"{wav.name}: {msg}")
            continue
        _save_mel(out_dir / f"{wav.stem}.ivvc", mel, {"source": wav.name, "mel_config": cfg.mel.to_dict()})
        print(f"{wav.name}\t{mel.shape[0]} frames")
    print(f"{len(wavs) - len(failures)} of {len(wavs)} files extracted")
    for msg in failures:
        print(f"error: {msg}", file=sys.stderr)
    return EXIT_FORMAT if failures else 0


def _read_pair_list(path: Path) -> list[tuple[str, str]]:
    pairs = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.rstrip("\r\n").split("\t")
        if len(fields) != 2 or not all(f.strip() for f in fields):
            raise UsageError(f"{path.name} line {n}: expected 'src_id<TAB>tgt_id'")
        pairs.append((fields[0].strip(), fields[1].strip()))
    return pairs


def cmd_align(args) -> int:
    cfg = load_run_config(args.config)
    src = args.src or cfg.data["source_dir"]
    tgt = args.tgt or cfg.data["target_dir"]
    lst = args.list or cfg.data["pairs_file"]
    if not (src and tgt and lst):
        raise UsageError("align needs --src, --tgt and --list (or data.* in --config)")
    src_dir, tgt_dir = _need_dir(src, "source"), _need_dir(tgt, "target")
    pairs = _read_pair_list(_need_file(lst, "pair list"))
    for sid, tid in pairs:
        for d, ident in ((src_dir, sid), (tgt_dir, tid)):
            if not (d / f"{ident}.ivvc").is_file():
                raise InputMissingError(f"missing id '{ident}' (no {ident}.ivvc in {d})")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    print("src\ttgt\tsrc_frames\ttgt_frames\tpath_length\tdtw_cost")
    for sid, tid in pairs:
        a = _load_tensor(src_dir / f"{sid}.ivvc", "mel").astype(np.float64)
        b = _load_tensor(tgt_dir / f"{tid}.ivvc", "mel").astype(np.float64)
        if a.shape[1] != b.shape[1]:
            raise ValueError(f"pair {sid}/{tid}: channel mismatch {a.shape[1]} vs {b.shape[1]}")
        path = dtw(a, b)
        pair = align_pair(a, b)
        meta = {"kind": "aligned", "src_id": sid, "tgt_id": tid, "dtw_cost": path.total_cost}
        container.save(out_dir / f"{sid}__{tid}.ivvc", meta, {"src": pair.source, "tgt": pair.target})
        print(f"{sid}\t{tid}\t{len(a)}\t{len(b)}\t{len(path)}\t{path.total_cost:.6f}")
    return 0


def _load_aligned(data_dir: Path):
    from .alignment import AlignedPair

    files = sorted(data_dir.glob("*.ivvc"))
    if not files:
        raise InputMissingError(f"no aligned pairs (*.ivvc) in {data_dir}")
    pairs = []
    for f in files:
        _, tensors = container.load(f)
        if "src" not in tensors or "tgt" not in tensors:
            raise container.IntegrityError(f"{f.name}: not an aligned pair (needs 'src' and 'tgt')")
        pairs.append(AlignedPair(tensors["src"].astype(np.float64), tensors["tgt"].astype(np.float64)))
    return pairs


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    data_dir = _need_dir(args.data, "data")
    train_cfg = cfg.train
    if args.max_steps is not None:
        train_cfg = dataclasses.replace(train_cfg, max_steps=args.max_steps)
    pairs = _load_aligned(data_dir)
    out_dir = Path(args.out)
    model = init_model(cfg.model, seed=train_cfg.seed, dtype=train_cfg.dtype)
    print(f"{len(pairs)} pairs, {model.parameter_count()} parameters, {train_cfg.max_steps} steps")

    every = max(1, train_cfg.max_steps // 10)
    window: list[float] = []

    def report(step, value):
        window.append(value)
        if step % every == 0 or step == train_cfg.max_steps:
            print(f"step {step:6d}  mean loss {np.mean(window):.6f}")
            window.clear()

    result = train(pairs, model, train_cfg, out_dir, callback=report)
    with open(out_dir / "loss_history.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(result.losses, 1):
            w.writerow([i, repr(v)])
    print(f"wrote {out_dir / 'final.ivvc'}")
    return 0


def _run_model(args, direction: str) -> int:
    ckpt = load_checkpoint(_need_file(args.ckpt, "checkpoint"))
    model = ckpt.build_model()
    cfg = load_run_config(getattr(args, "config", None))
    suffixes = {".ivvc", ".wav"} if direction == "convert" else {".ivvc"}
    files = _inputs(args.inp, suffixes)
    many = Path(args.inp).is_dir()
    if not files:
        print(f"0 files in {args.inp}")
        return 0
    wav_out = getattr(args, "wav", None)
    for f in files:
        if f.suffix.lower() == ".wav":
            mel = mel_spectrogram(read_wav(f, cfg.mel.sample_rate), cfg.mel)
        else:
            mel = _load_tensor(f, "mel")
        out = model.convert(mel) if direction == "convert" else model.invert(mel)
        dest = _out_path(args.out, f, many, ".ivvc")
        _save_mel(dest, np.asarray(out), {"source": f.name, "direction": direction})
        line = f"{f.name}\t{out.shape[0]} frames -> {dest}"
        if wav_out:
            wav_dest = _out_path(wav_out, f, many, ".wav")
            write_wav(wav_dest, griffin_lim_invert(np.asarray(out, dtype=np.float64), cfg.mel,
                                                   iterations=args.gl_iters))
            line += f", {wav_dest}"
        print(line)
    return 0


def cmd_convert(args) -> int:
    return _run_model(args, "convert")


def cmd_invert(args) -> int:
    return _run_model(args, "invert")


def _emit(text: str, out) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def _mel_files(path) -> dict[str, np.ndarray]:
    return {f.stem: _load_tensor(f, "mel").astype(np.float64) for f in _inputs(path, {".ivvc"})}


def _embeddings(path) -> list[np.ndarray]:
    """One vector per container: its 'embedding' tensor if present, else the reference embedding."""
    out = []
    for f in _inputs(path, {".ivvc"}):
        _, tensors = container.load(f)
        if "embedding" in tensors:
            out.append(tensors["embedding"].astype(np.float64).ravel())
        elif "mel" in tensors:
            out.append(reference_embedder(tensors["mel"]))
        else:
            raise container.IntegrityError(f"{f.name}: needs an 'embedding' or 'mel' tensor")
    return out


def _parse_set(arg: str) -> PairSet:
    try:
        name, rhs = arg.split("=", 1)
    except ValueError:
        raise UsageError(f"--set {arg!r}: expected NAME=DIR[,DIR,MODE]") from None
    parts = rhs.split(",")
    if len(parts) == 1:
        return PairSet(name, _embeddings(parts[0]))
    if len(parts) == 3 and parts[2] in ("matched", "cross"):
        return PairSet(name, _embeddings(parts[0]), _embeddings(parts[1]), parts[2])
    raise UsageError(f"--set {arg!r}: expected NAME=DIR or NAME=LEFT,RIGHT,matched|cross")


def cmd_eval(args) -> int:
    if args.mode == "msd":
        if not (args.ref and args.hyp):
            raise UsageError("--mode msd needs --ref and --hyp")
        refs, hyps = _mel_files(args.ref), _mel_files(args.hyp)
        missing = sorted(set(refs) - set(hyps))
        if missing:
            raise InputMissingError(f"no hypothesis for '{missing[0]}'")
        names = sorted(refs)
        text = msd_report([refs[n] for n in names], [hyps[n] for n in names], names).to_csv()
    elif args.mode == "roundtrip":
        if not (args.ckpt and args.inp):
            raise UsageError("--mode roundtrip needs --ckpt and --in")
        model = load_checkpoint(_need_file(args.ckpt, "checkpoint")).build_model()
        text = roundtrip_csv(roundtrip_report(model, _mel_files(args.inp)))
    else:
        if not args.set:
            raise UsageError("--mode similarity needs at least one --set")
        sets = [_parse_set(s) for s in args.set]
        reports = similarity_suite(sets, lambda e: e, args.pairs, args.seed)
        text = similarity_csv(reports)
    _emit(text, args.out)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="invvc", description="Invertible voice conversion on log-mel features.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("print-config", help="print the default JSON configuration")
    s.set_defaults(func=cmd_print_config)

    s = sub.add_parser("extract", help="WAV directory -> log-mel containers")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("align", help="DTW-align parallel feature pairs")
    s.add_argument("--src")
    s.add_argument("--tgt")
    s.add_argument("--list", help="lines of 'src_id<TAB>tgt_id'")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("train", help="train on aligned pairs")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--max-steps", type=int, help="override train.max_steps")
    s.set_defaults(func=cmd_train)

    for name, func, help_ in (
        ("convert", cmd_convert, "source -> target features"),
        ("invert", cmd_invert, "converted features -> source"),
    ):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--ckpt", required=True)
        s.add_argument("--in", dest="inp", required=True, help="file or directory")
        s.add_argument("--out", required=True)
        s.add_argument("--config", help="mel settings for WAV input and output")
        if name == "convert":
            s.add_argument("--wav", help="also write Griffin-Lim audio here")
            s.add_argument("--gl-iters", type=int, default=60)
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="MSD, similarity or round-trip reports (CSV)")
    s.add_argument("--mode", choices=("msd", "similarity", "roundtrip"), required=True)
    s.add_argument("--ref")
    s.add_argument("--hyp")
    s.add_argument("--ckpt")
    s.add_argument("--in", dest="inp")
    s.add_argument("--set", action="append", help="NAME=DIR or NAME=LEFT,RIGHT,matched|cross")
    s.add_argument("--pairs", type=int, default=1200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="also write the CSV here")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        code, msg = EXIT_USAGE, str(exc)
    except (InputMissingError, OSError) as exc:
        code, msg = EXIT_IO, str(exc)
    except ArithmeticError as exc:  # singular weights, divergence, non-finite values
        code, msg = EXIT_NUMERIC, str(exc)
    except (container.ContainerError, WavError, ValueError, KeyError) as exc:
        code, msg = EXIT_FORMAT, str(exc)
    print(f"error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
