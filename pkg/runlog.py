"""
Console logging helpers: timestamped status lines, stage banners, progress bars
"""

import sys
from datetime import datetime

from tqdm import tqdm

QUIET = False


def set_quiet(quiet):
    global QUIET
    QUIET = bool(quiet)


def _line(marker, message, stream=None):
    timestamp = datetime.now().strftime("%H:%M:%S")
    # tqdm.write keeps the line from tearing an active progress bar
    tqdm.write(f"[{timestamp}] {marker} {message}", file=stream or sys.stdout)


def log(message, marker="•"):
    if not QUIET:
        _line(marker, message)


def ok(message):
    if not QUIET:
        _line("✔", message)


def warn(message):
    _line("⚠", message, stream=sys.stderr)


def fail(message):
    _line("✗", message, stream=sys.stderr)


def banner(title, rows=()):
    """Print a stage header followed by aligned key/value rows."""
    if QUIET:
        return
    print("=" * 60)
    print(title)
    print("=" * 60)
    width = max((len(key) for key, _ in rows), default=0)
    for key, value in rows:
        print(f"{key.ljust(width)} : {value}")
    print("-" * 60)


def summary(rows):
    if QUIET:
        return
    print("\n=== Summary ===")
    for key, value in rows:
        print(f"• {key}: {value}")


def progress(iterable=None, **kwargs):
    kwargs.setdefault("leave", False)
    kwargs.setdefault("dynamic_ncols", True)
    return tqdm(iterable, disable=QUIET, **kwargs)
