"""Acceptance suite: one check per criterion, each at its stated tolerance.

Run with ``pytest tests/test_acceptance.py`` (or ``python tests/test_acceptance.py``).
A PASS/FAIL line per criterion is printed at the end of the session.
The two training criteria take a few minutes each.
"""

import math
import time

import numpy as np
import pytest
from conftest import randomize, toy_config
from hypothesis import given, settings
from hypothesis import strategies as st

from invvc import container
from invvc.alignment import AlignedPair, dtw
from invvc.cli import main as cli_main
from invvc.evaluation import PairSet, msd, similarity_suite
from invvc.model import InvvcModel, ModelConfig, NetConfig, orthonormal
from invvc.synthetic import linear_task, random_mels, speaker_corpus, speech_like
from invvc.tensor import Tensor, grad_check
from invvc.training import (
    AdamState,
    Checkpoint,
    TrainConfig,
    checkpoint_bytes,
    load_checkpoint,
    mel_loss,
    save_checkpoint,
    train,
)

RESULTS: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


@pytest.fixture(scope="module", autouse=True)
def _summary(request):
    yield
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")
    write = reporter.write_line if reporter else print
    write("")
    for n in range(1, 11):
        ok, detail = RESULTS.get(n, (False, "not run"))
        write(f"{'PASS' if ok else 'FAIL'}  criterion {n:2d}: {detail}")


# desk-scale configuration for the trained-model criteria
DESK_NET = NetConfig(n_blocks=1, d_h=32, block_inner_channels=64)
DESK_TRAIN = TrainConfig(crop_length=40, batch_size=8, max_steps=2000, seed=0, precision="float32")


@pytest.fixture(scope="module")
def linear_run():
    task = linear_task(n_pairs=200, n_frames=40, seed=0)
    model = InvvcModel(ModelConfig(n_invconv=2, n_flows=4, net=DESK_NET), seed=0, dtype=np.float32)
    t0 = time.time()
    result = train(task.pairs, model, DESK_TRAIN)
    return task, result, time.time() - t0


def _brute_force(a, b):
    """Exhaustive search over monotone (1,1)/(1,0)/(0,1) paths.

    Returns the minimum cost and the first optimal path in the order
    diagonal, then (1,0), then (0,1).
    """
    cost = np.linalg.norm(a[:, None] - b[None], axis=-1)
    ta, tb = cost.shape
    best = [np.inf, None]

    def walk(i, j, acc, path):
        if (i, j) == (ta - 1, tb - 1):
            if acc < best[0]:
                best[:] = [acc, list(path)]
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            if i + di < ta and j + dj < tb:
                path.append((i + di, j + dj))
                walk(i + di, j + dj, acc + cost[i + di, j + dj], path)
                path.pop()

    walk(0, 0, cost[0, 0], [(0, 0)])
    return best[0], best[1]


# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_1_invertibility(linear_run):
    task, result, _ = linear_run
    rng = np.random.default_rng(2024)
    held_out = [random_mels(rng, int(rng.integers(100, 301))) for _ in range(20)]
    m32 = result.model
    m64 = m32.astype(np.float64)
    msd32 = max(msd(x, m32.invert(m32.convert(x))) for x in held_out)
    msd64 = max(msd(x, m64.invert(m64.convert(x))) for x in held_out)
    record(
        1,
        msd32 < 0.1 and msd64 < 1e-6,
        f"worst round-trip MSD over 20 held-out utterances: 32-bit {msd32:.3g} dB (< 0.1), "
        f"64-bit {msd64:.3g} dB (< 1e-6)",
    )


def test_criterion_2_layer_round_trips():
    worst = {"coupling": 0.0, "flow": 0.0, "invconv": 0.0}
    conds = [0.0]
    cases = []

    @settings(max_examples=200, deadline=None, derandomize=True)
    @given(
        st.integers(0, 2**31 - 1),
        st.sampled_from([2, 4, 8, 16]),
        st.integers(1, 16),
    )
    def run(seed, half_pairs, t):
        c = 2 * half_pairs
        cfg = toy_config(channels=c, d_h=8, inner=12)
        model = randomize(InvvcModel(cfg, seed=seed), seed=seed + 1, scale=0.5)
        rng = np.random.default_rng(seed)
        # perturbed orthonormal: random but with conditioning bounded by ~(1 + 0.6) / (1 - 0.6)
        w = orthonormal(c, rng) + 0.3 / np.sqrt(c) * rng.standard_normal((c, c))
        model.invconvs[0].W.data = w
        conds[0] = max(conds[0], np.linalg.cond(w))
        x = Tensor(rng.standard_normal((1, t, c)))
        flow = model.flows[0]
        for name, layer in (("coupling", flow.a), ("coupling", flow.b), ("flow", flow)):
            err = np.abs(layer.inverse(layer.forward(x)).data - x.data).max()
            worst[name] = max(worst[name], err)
        conv = model.invconvs[0]
        worst["invconv"] = max(worst["invconv"], np.abs(conv.inverse(conv.forward(x).data) - x.data).max())
        cases.append(1)

    run()
    ok = len(cases) == 200 and max(worst.values()) < 1e-12
    detail = ", ".join(f"{k} {v:.2g}" for k, v in worst.items())
    record(
        2,
        ok,
        f"{len(cases)} cases, worst inf-norm errors (64-bit): {detail} (< 1e-12); "
        f"max invconv condition number {conds[0]:.1f}",
    )


def test_criterion_3_gradient_correctness():
    cfg = ModelConfig(
        n_channels=8, n_invconv=1, n_flows=1,
        net=NetConfig(n_blocks=1, d_h=16, block_inner_channels=20),
    )
    model = randomize(InvvcModel(cfg, seed=0), seed=1)
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal((4, 8)), rng.standard_normal((4, 8))
    params = model.parameters()
    report = grad_check(lambda *_: mel_loss(model.forward(x), y), params, tol=1e-4)
    n = sum(p.data.size for p in params)
    record(
        3,
        report.ok,
        f"{n} parameter coordinates, max relative error {report.max_rel_error:.2g} (< 1e-4; "
        f"denominator floored at 1e-3), {len(report.failing)} failing",
    )


def test_criterion_4_orthonormal_init():
    cfg = toy_config(channels=80, n_invconv=2, d_h=4, inner=4)
    worst = 0.0
    for seed in range(100):
        for conv in InvvcModel(cfg, seed=seed).invconvs:
            w = conv.W.data
            worst = max(worst, np.abs(w.T @ w - np.eye(80)).max())
    record(4, worst < 1e-6, f"max |W^T W - I| over 100 seeds x 2 invconvs: {worst:.2g} (< 1e-6)")


def test_criterion_5_dtw_exactness():
    rng = np.random.default_rng(5)
    cost_mismatch = path_mismatch = 0
    for _ in range(500):
        ta, tb = rng.integers(1, 7, size=2)
        a, b = rng.standard_normal((ta, 2)), rng.standard_normal((tb, 2))
        p = dtw(a, b)
        best, best_path = _brute_force(a, b)
        cost_mismatch += not math.isclose(p.total_cost, best, rel_tol=1e-12, abs_tol=1e-12)
        path_mismatch += p.pairs != best_path
    record(
        5,
        cost_mismatch == 0 and path_mismatch == 0,
        f"500 random cases: {cost_mismatch} cost mismatches, {path_mismatch} path mismatches",
    )


@pytest.mark.slow
def test_criterion_6_training_effectiveness(linear_run):
    task, result, seconds = linear_run
    initial = result.losses[0]
    final = float(np.mean(result.losses[-50:]))
    rng = np.random.default_rng(77)
    sources = [random_mels(rng, 40) for _ in range(20)]
    targets = [task.target_of(s) for s in sources]
    before = np.mean([msd(s, t) for s, t in zip(sources, targets)])
    after = np.mean([msd(result.model.convert(s), t) for s, t in zip(sources, targets)])
    ratio = final / initial
    record(
        6,
        ratio <= 0.10 and after <= 0.5 * before,
        f"loss ratio {ratio:.3f} (<= 0.10, last-50-step mean / first step) after "
        f"{len(result.losses)} steps in {seconds:.0f}s; held-out MSD {before:.1f} -> {after:.1f} dB "
        f"({100 * (1 - after / before):.0f}% lower, >= 50%)",
    )


@pytest.mark.slow
def test_criterion_7_similarity_direction():
    corp = speaker_corpus(n_speakers=3, n_sentences=60, seed=0)
    train_ids, test_ids = range(30), range(30, 60)
    pairs = [AlignedPair(corp.sources[k][i], corp.targets[i]) for k in range(3) for i in train_ids]
    model = InvvcModel(ModelConfig(n_invconv=2, n_flows=6, net=DESK_NET), seed=0, dtype=np.float32)
    model = train(pairs, model, TrainConfig(crop_length=40, max_steps=600)).model
    scores: dict[str, list[float]] = {}
    for k in range(3):
        src = [corp.sources[k][i] for i in test_ids]
        tgt = [corp.targets[i] for i in test_ids]
        vc = [model.convert(s).astype(np.float64) for s in src]
        inv = [model.invert(v).astype(np.float64) for v in vc]
        # Src-VC pairs each conversion with its own source; the others pair different sentences
        reports = similarity_suite([PairSet("Src-VC", src, vc, "matched")], pairs_per_set=30, seed=k)
        reports += similarity_suite(
            [PairSet("Src-INV", src, inv, "cross"), PairSet("Tgt-VC", tgt, vc, "cross")],
            pairs_per_set=400,
            seed=k,
        )
        for r in reports:
            scores.setdefault(r.name, []).append(r.mean_score)
    mean = {k: float(np.mean(v)) for k, v in scores.items()}
    record(
        7,
        mean["Src-INV"] > mean["Src-VC"] and mean["Tgt-VC"] > mean["Src-VC"],
        "mean cosine over 3 speakers (Src-VC 30 matched pairs each, others 400): "
        + ", ".join(f"{k} {v:.4f}" for k, v in mean.items()),
    )


@pytest.mark.slow
def test_criterion_8_determinism(tmp_path):
    import json

    from invvc.audio import Waveform, write_wav

    wavs = tmp_path / "wav"
    for side in ("src", "tgt"):
        (wavs / side).mkdir(parents=True)
    for i in range(4):
        write_wav(wavs / "src" / f"s{i}.wav", Waveform(speech_like(0.5 + 0.05 * i, seed=i)))
        write_wav(wavs / "tgt" / f"t{i}.wav", Waveform(0.7 * speech_like(0.55 + 0.05 * i, seed=10 + i)))
    (tmp_path / "pairs.txt").write_text("".join(f"s{i}\tt{i}\n" for i in range(4)))
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "net": {"n_blocks": 1, "d_h": 16, "block_inner_channels": 32},
        "train": {"crop_length": 30, "batch_size": 4, "max_steps": 200, "checkpoint_every": 100},
    }))

    def run(root):
        steps = [
            ["extract", "--in", str(wavs / "src"), "--out", f"{root}/feat/src", "--config", str(cfg)],
            ["extract", "--in", str(wavs / "tgt"), "--out", f"{root}/feat/tgt", "--config", str(cfg)],
            ["align", "--src", f"{root}/feat/src", "--tgt", f"{root}/feat/tgt",
             "--list", str(tmp_path / "pairs.txt"), "--out", f"{root}/aligned"],
            ["train", "--data", f"{root}/aligned", "--out", f"{root}/ckpt", "--config", str(cfg)],
            ["convert", "--ckpt", f"{root}/ckpt/final.ivvc", "--in", f"{root}/feat/src",
             "--out", f"{root}/vc"],
            ["invert", "--ckpt", f"{root}/ckpt/final.ivvc", "--in", f"{root}/vc",
             "--out", f"{root}/inv"],
        ]
        return [cli_main(argv) for argv in steps]

    codes = run(tmp_path / "run1") + run(tmp_path / "run2")
    files1 = sorted(p.relative_to(tmp_path / "run1") for p in (tmp_path / "run1").rglob("*") if p.is_file())
    files2 = sorted(p.relative_to(tmp_path / "run2") for p in (tmp_path / "run2").rglob("*") if p.is_file())
    differing = [str(f) for f in files1 if (tmp_path / "run1" / f).read_bytes() != (tmp_path / "run2" / f).read_bytes()]
    ok = codes == [0] * 12 and files1 == files2 and not differing and len(files1) > 0
    record(
        8,
        ok,
        f"{len(files1)} files per run (features, alignments, 3 checkpoints, loss CSV, converted, "
        f"inverted); {len(differing)} differ; exit codes {set(codes)}",
    )


def test_criterion_9_checkpoint_format(tmp_path):
    model = randomize(InvvcModel(toy_config(n_flows=2), seed=0))
    sd = model.state_dict()
    ckpt = Checkpoint(model.config, TrainConfig(), sd, 3, AdamState({k: v * 0 for k, v in sd.items()},
                                                                    {k: v * v for k, v in sd.items()}, 3))
    save_checkpoint(ckpt, tmp_path / "a.ivvc")
    save_checkpoint(load_checkpoint(tmp_path / "a.ivvc"), tmp_path / "b.ivvc")
    identical = (tmp_path / "a.ivvc").read_bytes() == (tmp_path / "b.ivvc").read_bytes()

    blob = checkpoint_bytes(ckpt)
    meta_len = int.from_bytes(blob[8:12], "little")
    count_at = 12 + meta_len
    count = int.from_bytes(blob[count_at : count_at + 4], "little")
    meta, tensors = container.decode(blob)
    tensors["flow.0.a.pre.0.weight"] = tensors["flow.0.a.pre.0.weight"][:, :, :-1]
    corruptions = {
        "bad magic": (b"RIFF" + blob[4:], container.BadMagicError),
        "unsupported version": (blob[:4] + (7).to_bytes(4, "little") + blob[8:], container.UnsupportedVersionError),
        "truncated": (blob[: len(blob) // 2], container.TruncatedFileError),
        "tensor count tampered": (
            blob[:count_at] + (count + 1).to_bytes(4, "little") + blob[count_at + 4 :],
            container.IntegrityError,
        ),
        "shape/config mismatch": (container.encode(meta, tensors), container.ShapeMismatchError),
    }
    outcomes = []
    for name, (data, expected) in corruptions.items():
        path = tmp_path / "bad.ivvc"
        path.write_bytes(data)
        try:
            load_checkpoint(path)
            raised = None
        except container.ContainerError as exc:
            raised = type(exc)
        outcomes.append((name, raised is expected))
    distinct = len({e for _, e in corruptions.values()}) == len(corruptions)
    ok = identical and distinct and all(o for _, o in outcomes)
    record(
        9,
        ok,
        f"save-load-save byte-identical: {identical}; "
        + ", ".join(f"{n}: {'ok' if o else 'WRONG'}" for n, o in outcomes),
    )


def test_criterion_10_msd_anchor():
    expected = 10.0 / math.log(10.0) * math.sqrt(2.0) * math.sqrt(80) * 0.1
    a = np.random.default_rng(10).standard_normal((25, 80)) - 4.0
    got = msd(a, a + 0.1)
    record(10, abs(got - expected) < 1e-9,
           f"msd = {got:.12f} dB vs closed form {expected:.12f} (|diff| {abs(got - expected):.1e} < 1e-9)")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
