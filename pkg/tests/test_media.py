from __future__ import annotations

import io
import json
import math
import threading
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from vidmem import media
from vidmem.errors import MediaError
from vidmem.memory import MemoryEntry, MemoryList, TimePeriod, VideoMeta

from conftest import C, F, U
from stubs import DECODER_SCRIPT, PROBE_SCRIPT, write_stub


def test_frame_count_examples():
    assert media.frame_count(200, Fraction(1)) == 200
    assert media.frame_count(10, Fraction(2)) == 20
    assert media.frame_count(1, Fraction(2)) == 2
    assert media.frame_count(800, Fraction(1, 4)) == 200
    assert media.frame_count(1, Fraction(1, 4)) == 1  # clamped


@settings(deadline=None)
@given(st.integers(1, 2_000), st.sampled_from([Fraction(1, 4), Fraction(1, 2), Fraction(1), Fraction(2),
                                                Fraction(4), Fraction(1, 3)]), st.integers(0, 10_000))
def test_timestamps_inside_period(duration, fps, start):
    p = TimePeriod(start, start + duration)
    ts = media.frame_timestamps(p, fps)
    assert len(ts) == max(1, math.floor(duration * fps))
    assert all(p.start_s <= t < p.end_s for t in ts)
    assert all(b - a == 1 / fps for a, b in zip(ts, ts[1:]))


def test_decoder_command_shape():
    cmd = media.decoder_command("ffmpeg", "in.mp4", TimePeriod(10, 20), Fraction(2), "/tmp/o")
    assert cmd[0] == "ffmpeg" and cmd[cmd.index("-frames:v") + 1] == "20"
    assert cmd[cmd.index("-ss") + 1] == "10.25" and "fps=2/1" in cmd[cmd.index("-vf") + 1]
    assert cmd[-1].endswith("frame_%06d.jpg")


def test_extract_frames_with_stub_decoder(tmp_path, monkeypatch):
    decoder = write_stub(tmp_path, "fakedec", DECODER_SCRIPT)
    src = tmp_path / "v.mp4"
    src.write_bytes(b"")
    log = tmp_path / "calls.log"
    monkeypatch.setenv("STUB_LOG", str(log))
    video = VideoMeta("v", 100, str(src))
    fs = media.extract_frames(video, TimePeriod(10, 15), Fraction(2), decoder=decoder)
    assert len(fs.frames) == 10 and fs.timestamps_s[0] == Fraction(41, 4)
    with Image.open(io.BytesIO(fs.frames[0])) as img:
        assert img.format == "JPEG" and max(img.size) == media.MAX_SIDE
    assert "-frames:v 10" in log.read_text()


def test_extract_frames_failure_carries_stderr(tmp_path, monkeypatch):
    decoder = write_stub(tmp_path, "fakedec", DECODER_SCRIPT)
    src = tmp_path / "v.mp4"
    src.write_bytes(b"")
    monkeypatch.setenv("STUB_FAIL", "1")
    with pytest.raises(MediaError) as info:
        media.extract_frames(VideoMeta("v", 100, str(src)), TimePeriod(0, 5), Fraction(1), decoder=decoder)
    assert "moov atom" in info.value.stderr
    assert info.value.exit_code == 3


def test_extract_frames_missing_inputs(tmp_path):
    with pytest.raises(MediaError):
        media.extract_frames(VideoMeta("v", 100, str(tmp_path / "nope.mp4")), TimePeriod(0, 5), Fraction(1))
    with pytest.raises(MediaError):
        media.extract_frames(VideoMeta("v", 10, "x"), TimePeriod(0, 50), Fraction(1))
    src = tmp_path / "v.mp4"
    src.write_bytes(b"")
    with pytest.raises(MediaError, match="decoder not found"):
        media.extract_frames(VideoMeta("v", 100, str(src)), TimePeriod(0, 5), Fraction(1),
                             decoder=str(tmp_path / "missing-bin"))


def test_probe_duration(tmp_path):
    probe = write_stub(tmp_path, "fakeprobe", PROBE_SCRIPT, duration="3612.48")
    assert media.probe_duration("x.mp4", probe) == 3612


def test_frameset_invariants():
    with pytest.raises(ValueError):
        media.FrameSet((), ())
    with pytest.raises(ValueError):
        media.FrameSet((b"a", b"b"), (Fraction(1), Fraction(1)))


# ---------------------------------------------------------------- cache

cm_st = st.lists(
    st.builds(MemoryEntry,
              st.builds(lambda a, n: TimePeriod(a, a + n), st.integers(0, 1000), st.integers(1, 100)),
              st.sampled_from([C, F, U]),
              st.text(min_size=1, max_size=30),
              st.text(max_size=10),
              st.integers(0, 5)),
    max_size=20,
).map(MemoryList.of)


@given(cm_st)
def test_cache_round_trip(cm):
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        media.cache_store("vid", cm, d)
        assert media.cache_load("vid", d) == cm


def test_cache_missing_and_malformed(tmp_path, caplog):
    assert len(media.cache_load("none", tmp_path)) == 0
    cm = MemoryList.of([MemoryEntry(TimePeriod(0, 10), C, "ok")])
    path = media.cache_store("v", cm, tmp_path)
    with open(path, "a") as fh:
        fh.write("{not json\n")
        fh.write(json.dumps({"video_id": "other", "start_s": 0, "end_s": 5, "level": "coarse", "text": "x",
                             "instruction": "", "revision": 0}) + "\n")
    with caplog.at_level("WARNING"):
        assert media.cache_load("v", tmp_path) == cm
    assert caplog.text.count("skipping malformed") == 2


def test_cache_concurrent_writers_leave_valid_file(tmp_path):
    lists = [MemoryList.of([MemoryEntry(TimePeriod(0, 10 + i), C, f"w{i}")]) for i in range(8)]
    threads = [threading.Thread(target=media.cache_store, args=("v", cm, tmp_path)) for cm in lists]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert media.cache_load("v", tmp_path) in lists
    assert not list(tmp_path.glob("*.tmp"))
