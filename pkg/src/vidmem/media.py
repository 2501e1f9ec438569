"""Frame extraction through an external decoder, and the on-disk memory cache."""

from __future__ import annotations

import base64
import io
import json
import logging
import math
import os
import subprocess
import tempfile
import threading
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from PIL import Image

from .errors import CacheError, MediaError
from .memory import MemoryList, TimePeriod, VideoMeta, entry_from_record, entry_to_record

log = logging.getLogger(__name__)

JPEG_QUALITY = 85
MAX_SIDE = 768


@dataclass(frozen=True)
class FrameSet:
    frames: tuple[bytes, ...]
    timestamps_s: tuple[Fraction, ...]

    def __post_init__(self) -> None:
        if not self.frames or len(self.frames) != len(self.timestamps_s):
            raise ValueError("frame and timestamp counts must match and be >= 1")
        if any(b <= a for a, b in zip(self.timestamps_s, self.timestamps_s[1:])):
            raise ValueError("timestamps must be strictly increasing")

    def data_urls(self) -> list[str]:
        return ["data:image/jpeg;base64," + base64.b64encode(f).decode("ascii") for f in self.frames]


def frame_count(duration_s: int | Fraction, fps: Fraction) -> int:
    return max(1, math.floor(Fraction(duration_s) * Fraction(fps)))


def frame_timestamps(period: TimePeriod, fps: Fraction) -> list[Fraction]:
    """Uniform 1/fps spacing with midpoint phase; a lone clamped frame sits mid-period."""
    fps = Fraction(fps)
    n = frame_count(period.duration, fps)
    if n == 1 and period.duration * fps < 1:
        return [period.start_s + Fraction(period.duration, 2)]
    return [period.start_s + (2 * j + 1) / (2 * fps) for j in range(n)]


def _fmt(x: Fraction) -> str:
    return f"{float(x):.6f}".rstrip("0").rstrip(".") or "0"


def decoder_command(decoder: str, source: str, period: TimePeriod, fps: Fraction, out_dir: str) -> list[str]:
    stamps = frame_timestamps(period, fps)
    n = len(stamps)
    rate = Fraction(fps) if n > 1 or period.duration * fps >= 1 else Fraction(1, period.duration)
    return [
        decoder, "-hide_banner", "-loglevel", "error", "-nostdin",
        "-ss", _fmt(stamps[0]),
        "-t", _fmt(Fraction(n) / rate),
        "-i", source,
        "-vf", f"fps={rate.numerator}/{rate.denominator},"
               f"scale='min({MAX_SIDE},iw)':'min({MAX_SIDE},ih)':force_original_aspect_ratio=decrease",
        "-frames:v", str(n),
        "-q:v", "2",
        os.path.join(out_dir, "frame_%06d.jpg"),
    ]


def encode_jpeg(data: bytes, max_side: int = MAX_SIDE, quality: int = JPEG_QUALITY) -> bytes:
    with Image.open(io.BytesIO(data)) as img:
        img = img.convert("RGB")
        img.thumbnail((max_side, max_side))
        buf = io.BytesIO()
        img.save(buf, format="JPEG", quality=quality)
        return buf.getvalue()


def extract_frames(video: VideoMeta, period: TimePeriod, fps: Fraction, decoder: str = "ffmpeg",
                   timeout_s: float = 600.0) -> FrameSet:
    if period.end_s > video.duration_s:
        raise MediaError(f"{period} exceeds video duration {video.duration_s}")
    if not video.source_uri or ("://" not in video.source_uri and not os.path.exists(video.source_uri)):
        raise MediaError(f"video source not found: {video.source_uri!r}")
    stamps = frame_timestamps(period, fps)
    with tempfile.TemporaryDirectory(prefix="vidmem-frames-") as tmp:
        cmd = decoder_command(decoder, video.source_uri, period, fps, tmp)
        try:
            proc = subprocess.run(cmd, capture_output=True, text=True, timeout=timeout_s)
        except FileNotFoundError as exc:
            raise MediaError(f"decoder not found: {decoder}") from exc
        except subprocess.TimeoutExpired as exc:
            raise MediaError(f"decoder timed out on {period}", str(exc.stderr or "")) from exc
        if proc.returncode != 0:
            raise MediaError(f"decoder exited with {proc.returncode} on {period}", proc.stderr)
        files = sorted(Path(tmp).glob("frame_*.jpg"))
        if not files:
            raise MediaError(f"decoder produced no frames for {period}", proc.stderr)
        try:
            frames = [encode_jpeg(f.read_bytes()) for f in files[: len(stamps)]]
        except OSError as exc:
            raise MediaError(f"undecodable frame image: {exc}", proc.stderr) from exc
    return FrameSet(tuple(frames), tuple(stamps[: len(frames)]))


def probe_duration(source: str, probe: str = "ffprobe") -> int:
    cmd = [probe, "-v", "error", "-show_entries", "format=duration", "-of", "default=nw=1:nk=1", source]
    try:
        proc = subprocess.run(cmd, capture_output=True, text=True, timeout=60)
    except FileNotFoundError as exc:
        raise MediaError(f"probe tool not found: {probe}") from exc
    if proc.returncode != 0:
        raise MediaError(f"could not probe {source}", proc.stderr)
    try:
        return max(1, int(float(proc.stdout.strip())))
    except ValueError as exc:
        raise MediaError(f"unreadable duration from probe: {proc.stdout!r}", proc.stderr) from exc


# ---------------------------------------------------------------- cache

_store_locks: dict[str, threading.Lock] = {}
_locks_guard = threading.Lock()


def _lock_for(video_id: str) -> threading.Lock:
    with _locks_guard:
        return _store_locks.setdefault(video_id, threading.Lock())


def cache_path(cache_dir: str | os.PathLike, video_id: str) -> Path:
    return Path(cache_dir) / f"{video_id}.memory.jsonl"


def cache_store(video_id: str, cm: MemoryList, cache_dir: str | os.PathLike) -> Path:
    """Write the memory list atomically (temp file + rename)."""
    path = cache_path(cache_dir, video_id)
    path.parent.mkdir(parents=True, exist_ok=True)
    with _lock_for(video_id):
        fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                for entry in cm:
                    fh.write(json.dumps(entry_to_record(video_id, entry), ensure_ascii=False) + "\n")
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    return path


def _decode_line(line: str, video_id: str):
    try:
        record = json.loads(line)
        if record.get("video_id") != video_id:
            raise ValueError(f"record belongs to {record.get('video_id')!r}")
        return entry_from_record(record)
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise CacheError(str(exc)) from exc


def cache_load(video_id: str, cache_dir: str | os.PathLike) -> MemoryList:
    """Load cached memories; malformed records are skipped with a warning."""
    path = cache_path(cache_dir, video_id)
    if not path.exists():
        return MemoryList()
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                entries.append(_decode_line(line, video_id))
            except CacheError as exc:
                log.warning("skipping malformed cache record %s:%d: %s", path, lineno, exc)
    return MemoryList.of(entries)
