# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

import logging
import typing as tp
from abc import ABC, abstractmethod
from pathlib import Path

import joblib
from omegaconf import OmegaConf

from jumpreflect.core.utils import open_write, sha_key

if tp.TYPE_CHECKING:
    from jumpreflect.core.lab_module import LabModule

logger = logging.getLogger("jumpreflect.cache")

CACHE_FORMAT = "1"


class MissingCache(Exception):
    """Raised when no usable cached result exists"""


class Cache(ABC):
    """
    Results of module runs, one entry per (module config, array item).
    A chaos-rate sweep that gets interrupted resumes from here: only the
    (N, seed) batches without an entry are submitted again.
    """

    def key(
        self,
        module: "LabModule",
        iteration_value: tp.Optional[tp.Any] = None,
        iteration_index: int = 0,
    ) -> str:
        owner = f"{type(self).__module__}.{type(self).__qualname__}:{CACHE_FORMAT}"
        raw = module.cache_key() + (iteration_value, iteration_index, owner)
        return sha_key(repr(raw))

    @abstractmethod
    def get_cache(
        self,
        module: "LabModule",
        iteration_value: tp.Optional[tp.Any] = None,
        iteration_index: int = 0,
        validate: bool = True,
    ) -> tp.Any:
        """cached result for this module iteration, raises MissingCache otherwise"""
        ...

    @abstractmethod
    def save_cache(
        self,
        module: "LabModule",
        value: tp.Any,
        iteration_value: tp.Optional[tp.Any] = None,
        iteration_index: int = 0,
    ) -> None:
        ...

    @abstractmethod
    def invalidate_cache(
        self,
        module: "LabModule",
        iteration_value: tp.Optional[tp.Any] = None,
        iteration_index: int = 0,
    ) -> None:
        ...

    def invalidate_module_cache(self, module: "LabModule") -> None:
        for idx, val in enumerate(module.array() or [None]):
            self.invalidate_cache(module, val, idx)


class NoCache(Cache):
    def get_cache(self, module, iteration_value=None, iteration_index=0, validate=True):
        raise MissingCache()

    def save_cache(self, module, value, iteration_value=None, iteration_index=0):
        pass

    def invalidate_cache(self, module, iteration_value=None, iteration_index=0):
        pass


class FileCache(Cache):
    """
    Entries live in `caching_dir/<module name>/` as `<key>.joblib`, next to a
    `<key>.yaml` dump of the module config that produced them.
    """

    def __init__(self, caching_dir: tp.Union[str, Path]):
        self.caching_dir = Path(caching_dir)
        self.caching_dir.mkdir(parents=True, exist_ok=True)

    def slot(
        self,
        module: "LabModule",
        iteration_value: tp.Optional[tp.Any] = None,
        iteration_index: int = 0,
    ) -> Path:
        """entry path without suffix"""
        folder = self.caching_dir / module.name()
        return folder / self.key(module, iteration_value, iteration_index)

    def get_cache(
        self,
        module: "LabModule",
        iteration_value: tp.Optional[tp.Any] = None,
        iteration_index: int = 0,
        validate: bool = True,
    ) -> tp.Any:
        slot = self.slot(module, iteration_value, iteration_index)
        result = slot.with_suffix(".joblib")
        if not result.is_file():
            raise MissingCache()
        label = f"{module.name()}:{iteration_index}"
        try:
            cached = joblib.load(result)
        except Exception as e:
            logger.warning(f"unreadable cache entry {result} for {label}", exc_info=e)
            result.unlink(missing_ok=True)
            raise MissingCache()
        if not validate:
            return cached
        try:
            valid = module.validate(cached, iteration_value, iteration_index)
        except Exception as e:
            logger.warning(f"cached result of {label} failed validation", exc_info=e)
            valid = False
        if not valid:
            self.invalidate_cache(module, iteration_value, iteration_index)
            raise MissingCache()
        return cached

    def save_cache(
        self,
        module: "LabModule",
        value: tp.Any,
        iteration_value: tp.Optional[tp.Any] = None,
        iteration_index: int = 0,
    ) -> None:
        slot = self.slot(module, iteration_value, iteration_index)
        label = f"{module.name()}:{iteration_index}"
        try:
            slot.parent.mkdir(parents=True, exist_ok=True)
            with open_write(slot.with_suffix(".joblib"), "wb") as o:
                joblib.dump(value, o)
            with open_write(slot.with_suffix(".yaml")) as o:
                o.write(OmegaConf.to_yaml(module.config))
            logger.info(f"cached {label} in {slot.parent}")
        except Exception as e:
            logger.warning(f"couldn't cache {label} in {slot.parent}", exc_info=e)

    def invalidate_cache(
        self,
        module: "LabModule",
        iteration_value: tp.Optional[tp.Any] = None,
        iteration_index: int = 0,
    ) -> None:
        slot = self.slot(module, iteration_value, iteration_index)
        logger.info(f"dropping cache entry {slot.name} of {module.name()}")
        for suffix in (".joblib", ".yaml"):
            slot.with_suffix(suffix).unlink(missing_ok=True)
