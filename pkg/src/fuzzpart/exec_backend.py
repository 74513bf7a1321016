"""Backend driving external fuzzers through shell command templates.

Templates may use ``{seed}``, ``{allowlist}`` and ``{dir}`` placeholders.
Workers write AFL-style queues (``<dir>/queue/id:NNNNNN,time:<ms>``); the
monitor mirrors the global queue into ``<out>/queue`` before each launch.
"""

from __future__ import annotations

import logging
import re
import shlex
import subprocess
import time
from pathlib import Path
from typing import Callable, Sequence

from .coverage import TraceEvent, parse_trace
from .orchestrator import BackendError, FuzzBackend, Seed, WorkerTask, format_allowlist

log = logging.getLogger(__name__)

_TIME_RE = re.compile(r"time:(\d+)")


def fill(template: str, **values: str | Path) -> list[str]:
    """Split ``template`` like a shell would, then substitute placeholders per word
    (so substituted paths containing spaces stay one argument)."""
    argv = shlex.split(template)
    for key, value in values.items():
        argv = [arg.replace("{" + key + "}", str(value)) for arg in argv]
    return argv


def seed_filename(n: int, timestamp_ms: int) -> str:
    return f"id:{n:06d},time:{timestamp_ms}"


def pairs_to_trace(pairs: Sequence[tuple[str, str]]) -> list[TraceEvent]:
    """Turn bare caller/callee pairs into a balanced enter/exit trace."""
    events = []
    for caller, callee in pairs:
        events += [TraceEvent("E", caller), TraceEvent("E", callee), TraceEvent("X", callee), TraceEvent("X", caller)]
    return events


class ExecBackend(FuzzBackend):
    def __init__(
        self,
        out_dir: str | Path,
        fuzz_cmd: str,
        profile_cmd: str,
        coverage_cmd: str,
        function_list: str | Path | None = None,
        poll_seconds: float = 1.0,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.out = Path(out_dir)
        self.fuzz_cmd = fuzz_cmd
        self.profile_cmd = profile_cmd
        self.coverage_cmd = coverage_cmd
        self.function_list_path = Path(function_list) if function_list else None
        self.poll_seconds = poll_seconds
        self._clock = clock
        self._sleep = sleep
        self._start = clock()
        self._procs: list[subprocess.Popen] = []
        self._seen: set[Path] = set()
        self._paths: dict[str, Path] = {}
        self._launches = 0
        self._mirrored: set[str] = set()

    def now(self) -> int:
        return int(self._clock() - self._start)

    def _write_queue(self, corpus: Sequence[Seed]) -> Path:
        qdir = self.out / "queue"
        qdir.mkdir(parents=True, exist_ok=True)
        for seed in corpus:
            if seed.id in self._mirrored:
                continue
            path = qdir / seed_filename(len(self._mirrored), seed.timestamp)
            path.write_bytes(seed.data)
            self._mirrored.add(seed.id)
            self._paths.setdefault(seed.id, path)
        return qdir

    def launch_workers(self, tasks: Sequence[WorkerTask], corpus: Sequence[Seed]) -> None:
        self._launches += 1
        try:
            qdir = self._write_queue(corpus)
            for w, task in enumerate(tasks):
                wdir = self.out / f"worker_{w:02d}"
                (wdir / "queue").mkdir(parents=True, exist_ok=True)
                allow = task.path
                if allow is None:
                    allow = wdir / f"allowlist_{self._launches:03d}.txt"
                    allow.write_text(format_allowlist(task.allowlist or ()), encoding="utf-8")
                argv = fill(self.fuzz_cmd, seed=qdir, allowlist=allow, dir=wdir)
                self._procs.append(subprocess.Popen(argv, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL))
        except OSError as exc:
            self.terminate_workers()
            raise BackendError(str(exc)) from exc

    def terminate_workers(self) -> None:
        for proc in self._procs:
            if proc.poll() is None:
                proc.terminate()
        for proc in self._procs:
            try:
                proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
        self._procs = []

    def run_for(self, duration: int) -> None:
        end = self._clock() + duration
        while (left := end - self._clock()) > 0:
            self._sleep(min(left, self.poll_seconds))

    def collect_new_seeds(self) -> list[Seed]:
        seeds = []
        for path in sorted(self.out.glob("worker_*/queue/*")):
            if path in self._seen or not path.is_file():
                continue
            self._seen.add(path)
            try:
                data = path.read_bytes()
                m = _TIME_RE.search(path.name)
                ts = int(m.group(1)) if m else int(path.stat().st_mtime * 1000)
            except OSError as exc:
                log.warning("skipping unreadable seed %s: %s", path, exc)
                continue
            seed = Seed(data, ts)
            self._paths.setdefault(seed.id, path)
            seeds.append(seed)
        return seeds

    def _run(self, template: str, seed: Seed) -> str:
        path = self._paths.get(seed.id)
        if path is None:
            path = self.out / "seeds" / seed.id
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(seed.data)
            self._paths[seed.id] = path
        argv = fill(template, seed=path, dir=self.out)
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=60)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise BackendError(f"{argv[0]}: {exc}") from exc
        if proc.returncode != 0:
            raise BackendError(f"{argv[0]} exited with {proc.returncode}")
        return proc.stdout

    def profile_seed(self, seed: Seed) -> list[TraceEvent]:
        """Accepts either trace lines (``E``/``X``/``B``) or ``caller<TAB>callee`` lines."""
        out = self._run(self.profile_cmd, seed)
        lines = [ln for ln in out.splitlines() if ln.strip() and not ln.startswith("#")]
        if lines and all("\t" in ln for ln in lines):
            return pairs_to_trace([tuple(ln.split("\t", 1)) for ln in lines])
        try:
            return parse_trace(out)
        except ValueError as exc:
            raise BackendError(f"bad profile output: {exc}") from exc

    def coverage_of_seed(self, seed: Seed) -> dict[str, tuple[int, int]]:
        cov = {}
        for line in self._run(self.coverage_cmd, seed).splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            try:
                cov[parts[0]] = (int(parts[1]), int(parts[2]))
            except (IndexError, ValueError):
                raise BackendError(f"bad coverage line {line!r}") from None
        return cov

    def function_list(self) -> set[str]:
        if self.function_list_path is None:
            return set()
        text = self.function_list_path.read_text(encoding="utf-8")
        return {ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")}


def load_corpus(corpus_dir: str | Path) -> list[Seed]:
    return [Seed(p.read_bytes(), 0) for p in sorted(Path(corpus_dir).iterdir()) if p.is_file()]
