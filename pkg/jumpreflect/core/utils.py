# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

import contextlib
import hashlib
import json
import logging
import os
import tempfile
import time
import typing as tp
from pathlib import Path

import numpy as np
import omegaconf

logger = logging.getLogger("jumpreflect.utils")


def sha_key(raw_key: str) -> str:
    return hashlib.sha256(raw_key.encode("utf-8")).hexdigest()


def ensure_dir(path: tp.Union[str, Path]) -> Path:
    os.makedirs(path, exist_ok=True)
    return Path(path)


def tmp_file(output: Path) -> Path:
    """a sibling temp file, so that the final rename stays on one filesystem"""
    suffix = "".join(output.suffixes)
    prefix = output.name[: len(output.name) - len(suffix)] + "."
    _, tmp_path = tempfile.mkstemp(
        dir=output.parent, prefix=prefix, suffix=".tmp" + suffix
    )
    return Path(tmp_path)


@contextlib.contextmanager
def open_write(
    output: tp.Union[str, Path], mode: str = "wt", **kwargs
) -> tp.Iterator[tp.IO]:
    """
    Open a temporary file for writing, and on success rename it to the target name.
    Readers never see a half written artifact.
    """
    assert "w" in mode, f"Can't use open_write with mode: {mode}"
    output = Path(output)
    tmp = tmp_file(output)
    if "b" not in mode:
        kwargs.setdefault("encoding", "utf-8")
    try:
        with open(tmp, mode=mode, **kwargs) as o:
            yield o
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    tmp.replace(output)


def _json_default(obj: tp.Any) -> tp.Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"{type(obj)} is not JSON serializable")


def write_json(output: tp.Union[str, Path], payload: tp.Any) -> Path:
    output = Path(output)
    with open_write(output) as o:
        json.dump(payload, o, indent=2, sort_keys=True, default=_json_default)
        o.write("\n")
    return output


TConfig = tp.TypeVar("TConfig")


def promote_config(
    config: omegaconf.DictConfig, config_class: tp.Type[TConfig]
) -> TConfig:
    if hasattr(config, "_target_"):
        # hydra already used the _target_, the structured config doesn't know it
        read_only = config._get_flag("readonly")
        omegaconf.OmegaConf.set_readonly(config, False)
        del config._target_
        omegaconf.OmegaConf.set_readonly(config, read_only)

    # merge into the structured proto so that unknown keys fail loudly
    proto = omegaconf.OmegaConf.structured(config_class)
    proto.merge_with(config)
    if hasattr(config, "_parent"):
        proto._set_parent(config._parent)
    return proto  # type: ignore


@contextlib.contextmanager
def measure(
    start_msg: str,
    logger: "logging.Logger",
    end_msg: str = "done in",
    enable_log: bool = True,
) -> tp.Iterator[None]:
    if enable_log:
        logger.info(start_msg)
    start = time.perf_counter()
    yield
    if enable_log:
        logger.info(f"{start_msg} {end_msg}: {time.perf_counter() - start:.3f} secs")


T = tp.TypeVar("T")


def batch(items: tp.Iterable[T], batch_size: int) -> tp.Iterator[tp.List[T]]:
    assert batch_size > 0, f"batch_size must be positive, got {batch_size}"
    current: tp.List[T] = []
    for item in items:
        current.append(item)
        if len(current) == batch_size:
            yield current
            current = []
    if current:
        yield current


def split_in(items: tp.Sequence[T], parts: int) -> tp.List[tp.List[T]]:
    """split items into at most `parts` contiguous batches of near equal size"""
    if not items:
        return []
    parts = max(1, min(parts, len(items)))
    size = -(-len(items) // parts)
    return list(batch(items, size))
