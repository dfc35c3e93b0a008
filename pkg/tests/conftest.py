import numpy as np
import pytest
import torch

from dualdit.dsp import Waveform
from dualdit.io import write_wav
from tests.helpers import tone, white


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def audio_tree(tmp_path):
    """Clean speech stand-ins, captioned noise clips and two impulse responses on disk."""
    import json

    clean_dir, noise_dir, rir_dir = tmp_path / "clean", tmp_path / "noise", tmp_path / "rir"
    for d in (clean_dir, noise_dir, rir_dir):
        d.mkdir()
    clean_rows = []
    for i, (f, text) in enumerate([(220, "hello there"), (330, "good morning"), (440, "see you soon")]):
        write_wav(clean_dir / f"c{i}.wav", tone(f, 0.4))
        clean_rows.append({"audio_path": f"clean/c{i}.wav", "transcript": text, "id": f"c{i}"})
    noise_rows = []
    for i, caption in enumerate(["steady rain on a roof", "busy street traffic"]):
        write_wav(noise_dir / f"n{i}.wav", white(0.3, seed=i))
        noise_rows.append({"audio_path": f"noise/n{i}.wav", "env_caption": caption, "id": f"n{i}"})
    decay = np.exp(-np.arange(400) / 60.0) * np.random.default_rng(5).standard_normal(400)
    decay[0] = 1.0
    write_wav(rir_dir / "room_a.wav", Waveform(decay / np.abs(decay).max(), 16000))
    delta = np.zeros(64)
    delta[0] = 1.0
    write_wav(rir_dir / "dry.wav", Waveform(delta, 16000))
    (tmp_path / "clean.jsonl").write_text("".join(json.dumps(r) + "\n" for r in clean_rows))
    (tmp_path / "noise.jsonl").write_text("".join(json.dumps(r) + "\n" for r in noise_rows))
    return tmp_path


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
