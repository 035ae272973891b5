import asyncio as aio
import contextlib
import logging
import math
import os
import shutil
import tempfile
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Sequence, TypeVar

import orjson


logger = logging.getLogger("regioncounter.utils")

T = TypeVar("T")
R = TypeVar("R")

JSON_OPTS = orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY


def round_half_up(value: float) -> int:
    return math.floor(value + 0.5)


def frame_sort_key(frame_id: str) -> tuple[int, int | str]:
    "Numeric ids sort numerically and before any other id."
    if frame_id.isdigit():
        return (0, int(frame_id))
    return (1, frame_id)


def json_dump(obj: Any) -> bytes:
    return orjson.dumps(obj, option=JSON_OPTS) + b"\n"


def json_load(data: bytes | str) -> Any:
    return orjson.loads(data)


def write_json(path: Path, obj: Any):
    Path(path).write_bytes(json_dump(obj))


def read_json(path: Path) -> Any:
    return json_load(Path(path).read_bytes())


@contextlib.contextmanager
def staged_output(target: Path) -> Iterator[Path]:
    """Yield a temporary directory next to `target`.
    On success it replaces `target` in one rename, on failure it is removed
    and `target` is left untouched.
    """
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if target.exists():
        if target.is_dir():
            shutil.rmtree(target)
        else:
            target.unlink()
    os.replace(tmp, target)
    logger.debug(f"Wrote {target}")


def atomic_write_bytes(path: Path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


async def _gather_threads(
    fn: Callable[[T], R], items: Sequence[T], workers: int
) -> list[R]:
    sem = aio.Semaphore(max(1, workers))

    async def run(item: T) -> R:
        async with sem:
            return await aio.to_thread(fn, item)

    return list(await aio.gather(*(run(item) for item in items)))


def map_frames(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> list[R]:
    """Apply `fn` to every item on a bounded thread pool.
    Results keep the order of `items`.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    return aio.run(_gather_threads(fn, items, workers))
