"""Smoke test for the `latch` extension module.

Build first with `cargo build -p latch-py` (or `maturin develop`), then run
`python3 python/smoke_test.py`. When `latch` is not installed the script
loads the freshly built library from target/.
"""

import importlib.util
import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_latch():
    try:
        import latch

        return latch
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "liblatch.so"
        if lib.exists():
            tmp = Path(tempfile.mkdtemp())
            shutil.copy(lib, tmp / "latch.so")
            spec = importlib.util.spec_from_file_location("latch", tmp / "latch.so")
            module = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(module)
            return module
    sys.exit("latch module not found; run `cargo build -p latch-py` first")


def main():
    latch = load_latch()

    cfg = latch.Config.load(str(ROOT / "configs" / "desk.ini"))
    assert cfg.frames == 8192 // latch.HOP, cfg.frames
    cfg.seed = 7
    assert "seed=7" in cfg.to_ini()

    clip = latch.random_clips(1, 4096, seed=3)[0]
    wave = clip.wave
    assert len(wave) == 4096 and wave.sample_rate == latch.SAMPLE_RATE

    for kind in ("intensity", "pitch", "beats"):
        track = latch.extract(kind, wave)
        assert track.frames == 4096 // latch.HOP
        err = latch.alignment(track, track)
        if kind == "intensity":
            expected = 0.0
        else:
            # BCE of a probability track against itself is its mean entropy.
            eps = 1e-7
            ps = [min(max(p, eps), 1 - eps) for p in track.values]
            expected = -sum(p * math.log(p) + (1 - p) * math.log(1 - p) for p in ps) / len(ps)
        assert abs(err - expected) < 1e-4 * (1 + expected), (kind, err, expected)
        assert all(math.isfinite(v) for v in track.values)

    mask = latch.make_mask(100, 0.2)
    assert sum(mask) == 20 and mask[0] and not mask[20]

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        wave.write(str(tmp / "clip.wav"))
        back = latch.Waveform.read(str(tmp / "clip.wav"))
        assert len(back) == len(wave)
        assert max(abs(a - b) for a, b in zip(back.samples, wave.samples)) < 1e-4

        beats = latch.extract("beats", wave)
        latch.write_tracks_csv(str(tmp / "beats.csv"), [beats])
        (read,) = latch.read_tracks_csv(str(tmp / "beats.csv"))
        assert read.kind == "beats" and read.frames == beats.frames

        missing = latch.Config()
        missing.dir = str(tmp / "empty")
        try:
            latch.generate(missing, str(tmp / "out"), backend="none", runs=1)
        except FileNotFoundError as e:
            assert "train vae" in str(e)
        else:
            raise AssertionError("generate without checkpoints should fail")

        try:
            latch.extract("loudness", wave)
        except ValueError:
            pass
        else:
            raise AssertionError("unknown control kind accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
