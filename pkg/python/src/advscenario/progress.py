"""Progress reporting for calibration, training and generation loops.

Every long loop in the package (GA generations, PPO updates, GAIL and
adversarial episodes, scenario runs) opens a `track` block and reports one
update per iteration. Updates go to the active tracker: tqdm bars on stderr
when tqdm is installed, a user callback after `set_callback`, or nothing.

Example:
    def report(event, operation, id, current, total, message):
        if event == "update":
            print(f"{operation}: {current}/{total or '?'} {message or ''}")

    advscenario.progress.set_callback(report)

Callbacks receive `event` in ("start", "update", "finish"), the loop name,
an id unique per `track` block, the iteration count, the expected total
(None when open-ended) and an optional status string such as
"best=0.0312".
"""

import itertools
import sys
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, Optional

ProgressCallback = Callable[[str, str, int, int, Optional[int], Optional[str]], None]

# tqdm unit label per loop
UNITS = {
    "IDM calibration": "gen",
    "PPO training": "update",
    "GAIL training": "episode",
    "Adversarial training": "episode",
    "Scenario generation": "run",
}


def _has_tqdm() -> bool:
    try:
        import tqdm  # noqa: F401
    except ImportError:
        return False
    return True


def format_metrics(metrics: Dict[str, float]) -> Optional[str]:
    """Render loop metrics as a compact "name=value" status string."""
    if not metrics:
        return None
    return " ".join(f"{name}={value:.4g}" for name, value in metrics.items())


class TqdmProgressTracker:
    """One tqdm bar per open `track` block, closed when the block ends."""

    def __init__(self):
        try:
            from tqdm.auto import tqdm
        except ImportError as e:
            raise RuntimeError("tqdm is not installed. Install with: pip install 'advscenario[progress]'") from e
        self.tqdm = tqdm
        self._bars: Dict[int, object] = {}

    def __call__(self, event: str, operation: str, id: int, current: int,
                 total: Optional[int], message: Optional[str]):
        if event == "start":
            self._bars[id] = self.tqdm(total=total, desc=operation, unit=UNITS.get(operation, "it"),
                                       position=len(self._bars), leave=False, file=sys.stderr)
            return
        bar = self._bars.get(id) if event == "update" else self._bars.pop(id, None)
        if bar is None:
            return
        if event == "update":
            bar.n = current  # type: ignore[attr-defined]
            if message:
                bar.set_postfix_str(message, refresh=False)  # type: ignore[attr-defined]
            bar.refresh()  # type: ignore[attr-defined]
        else:
            bar.close()  # type: ignore[attr-defined]


class CustomCallbackTracker:
    """Forwards every event unchanged to a user callback."""

    def __init__(self, callback: ProgressCallback):
        self.callback = callback

    def __call__(self, event: str, operation: str, id: int, current: int,
                 total: Optional[int], message: Optional[str]):
        self.callback(event, operation, id, current, total, message)


_current_tracker: Optional[ProgressCallback] = None
_ids = itertools.count(1)


def set_callback(callback: Optional[ProgressCallback] = None):
    """Route progress events to `callback`; None turns reporting off.

    Args:
        callback: ``fn(event, operation, id, current, total, message)``.
    """
    global _current_tracker
    _current_tracker = None if callback is None else CustomCallbackTracker(callback)


def enable_tqdm():
    """Show tqdm bars on stderr.

    Raises:
        RuntimeError: If tqdm is not installed.
    """
    global _current_tracker
    _current_tracker = TqdmProgressTracker()


def disable():
    """Stop reporting progress."""
    set_callback(None)


def install_default_tracker():
    """Use tqdm bars when tqdm is importable; stay silent otherwise.

    Called once when advscenario is imported.
    """
    global _current_tracker
    _current_tracker = None
    if _has_tqdm():
        try:
            enable_tqdm()
        except RuntimeError:
            _current_tracker = None


class ProgressHandle:
    """Update handle for one `track` block."""

    def __init__(self, operation: str, id: int, total: Optional[int]):
        self.operation = operation
        self.id = id
        self.total = total
        self.current = 0

    def update(self, current: Optional[int] = None, message: Optional[str] = None, **metrics: float):
        """Advance the count (by one, or to `current`) and report it.

        Keyword metrics are formatted into the status string when no
        explicit `message` is given.
        """
        self.current = self.current + 1 if current is None else current
        if _current_tracker is not None:
            _current_tracker("update", self.operation, self.id, self.current, self.total,
                             message or format_metrics(metrics))


@contextmanager
def track(operation: str, total: Optional[int] = None) -> Iterator[ProgressHandle]:
    """Emit start and finish around a loop and hand out its update handle.

    Example:
        with progress.track("GAIL training", total=episodes) as bar:
            for episode in range(episodes):
                ...
                bar.update(episode + 1, acc=accuracy)
    """
    handle = ProgressHandle(operation, next(_ids), total)
    if _current_tracker is not None:
        _current_tracker("start", operation, handle.id, 0, total, None)
    try:
        yield handle
    finally:
        if _current_tracker is not None:
            _current_tracker("finish", operation, handle.id, handle.current, total, None)


install_default_tracker()


__all__ = [
    "ProgressCallback",
    "ProgressHandle",
    "TqdmProgressTracker",
    "CustomCallbackTracker",
    "set_callback",
    "enable_tqdm",
    "disable",
    "install_default_tracker",
    "format_metrics",
    "track",
]
