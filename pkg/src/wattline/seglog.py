"""Append-only, line-oriented segment log with torn-tail recovery.

Layout: ``<dir>/segments/NNNNNN.log``. Every append is a single write of one or
more newline-terminated UTF-8 lines followed by flush and fsync. On open, an
unterminated final line in the newest segment is a torn write: it is dropped
and truncated away. Any other undecodable line is corruption and raises
:class:`CorruptSegmentError`.

Compaction writes a replacement ``segments.new`` directory and swaps it in
with renames; :meth:`SegmentLog.open` finishes or rolls back an interrupted
swap, so readers see either the old or the new contents, never a mix.
"""

from __future__ import annotations

import logging
import os
import shutil
from pathlib import Path
from typing import Callable, Iterable

from wattline.faults import crashpoint

log = logging.getLogger(__name__)

SEGMENT_BYTES = 4 * 1024 * 1024


class CorruptSegmentError(Exception):
    def __init__(self, path: Path, offset: int, reason: str):
        self.path = path
        self.offset = offset
        super().__init__(f"corrupt segment {path} at byte {offset}: {reason}")


def _fsync_dir(path: Path) -> None:
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)


def _segment_name(n: int) -> str:
    return f"{n:06d}.log"


class SegmentLog:
    """Durable line log. Not thread-safe on its own; owners serialize access."""

    def __init__(self, root: str | Path, segment_bytes: int = SEGMENT_BYTES, fsync: bool = True):
        self.root = Path(root)
        self.segment_bytes = segment_bytes
        self.fsync = fsync
        self.dir = self.root / "segments"
        self._fh = None
        self._current: int = 0
        self._size: int = 0

    # -- opening / recovery -------------------------------------------------

    def _finish_swap(self) -> None:
        new, old = self.root / "segments.new", self.root / "segments.old"
        if new.exists() and not self.dir.exists():
            new.rename(self.dir)
        elif new.exists():
            shutil.rmtree(new)  # swap never started; old contents stand
        if old.exists():
            shutil.rmtree(old)
        _fsync_dir(self.root)

    def segments(self) -> list[Path]:
        if not self.dir.exists():
            return []
        out = []
        for p in self.dir.iterdir():
            if p.suffix == ".log" and p.stem.isdigit():
                out.append(p)
        return sorted(out, key=lambda p: int(p.stem))

    def open(self, parse: Callable[[str], object]) -> list:
        """Recover the log and return ``(path, offset, parse(line))`` for every
        durable line, in order.

        ``parse`` must raise ``ValueError`` for a line it cannot interpret.
        """
        self.root.mkdir(parents=True, exist_ok=True)
        self._finish_swap()
        self.dir.mkdir(exist_ok=True)
        segs = self.segments()
        out = []
        for i, path in enumerate(segs):
            data = path.read_bytes()
            last = i == len(segs) - 1
            pos = 0
            while pos < len(data):
                nl = data.find(b"\n", pos)
                if nl < 0:
                    if not last:
                        raise CorruptSegmentError(path, pos, "unterminated line in sealed segment")
                    log.warning("discarding torn entry at %s byte %d (%d bytes)",
                                path, pos, len(data) - pos)
                    with open(path, "r+b") as fh:
                        fh.truncate(pos)
                        fh.flush()
                        os.fsync(fh.fileno())
                    break
                raw = data[pos:nl]
                try:
                    out.append((path, pos, parse(raw.decode("utf-8"))))
                except (UnicodeDecodeError, ValueError) as exc:
                    raise CorruptSegmentError(path, pos, str(exc)) from None
                pos = nl + 1
        if segs:
            self._current = int(segs[-1].stem)
            self._size = segs[-1].stat().st_size
        else:
            self._current = 1
            self._size = 0
        self._open_current()
        return out

    def _open_current(self) -> None:
        if self._fh is not None:
            self._fh.close()
        self._fh = open(self.dir / _segment_name(self._current), "ab")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    # -- writing ------------------------------------------------------------

    def append(self, lines: Iterable[str]) -> None:
        """Durably append ``lines`` as one write. On failure the segment is
        truncated back to its previous length and the error re-raised."""
        payload = "".join(line + "\n" for line in lines).encode("utf-8")
        if not payload:
            return
        if self._fh is None:
            raise RuntimeError("log is not open")
        if self._size > 0 and self._size + len(payload) > self.segment_bytes:
            self._current += 1
            self._size = 0
            self._open_current()
            _fsync_dir(self.dir)
        start = self._size
        try:
            crashpoint("seglog.append.before_write")
            self._fh.write(payload)
            self._fh.flush()
            crashpoint("seglog.append.after_write")
            if self.fsync:
                os.fsync(self._fh.fileno())
        except OSError:
            try:
                self._fh.truncate(start)
                self._fh.seek(start)
            except OSError:
                log.exception("could not roll back failed append")
            raise
        self._size = start + len(payload)

    def rewrite(self, lines: Iterable[str]) -> None:
        """Replace the whole log with ``lines`` (compaction)."""
        new = self.root / "segments.new"
        if new.exists():
            shutil.rmtree(new)
        new.mkdir()
        n, size, fh = 1, 0, open(new / _segment_name(1), "wb")
        try:
            for line in lines:
                data = (line + "\n").encode("utf-8")
                if size > 0 and size + len(data) > self.segment_bytes:
                    fh.flush()
                    os.fsync(fh.fileno())
                    fh.close()
                    n, size = n + 1, 0
                    fh = open(new / _segment_name(n), "wb")
                fh.write(data)
                size += len(data)
            fh.flush()
            os.fsync(fh.fileno())
        finally:
            fh.close()
        _fsync_dir(new)
        self.close()
        crashpoint("seglog.rewrite.before_swap")
        self.dir.rename(self.root / "segments.old")
        crashpoint("seglog.rewrite.mid_swap")
        new.rename(self.dir)
        _fsync_dir(self.root)
        shutil.rmtree(self.root / "segments.old")
        self._current, self._size = n, size
        self._open_current()

    def read_lines(self) -> list[str]:
        """Every durable line currently in the log (used by compaction)."""
        out = []
        for path in self.segments():
            data = path.read_bytes()
            end = data.rfind(b"\n") + 1
            out.extend(data[:end].decode("utf-8").split("\n")[:-1])
        return out
