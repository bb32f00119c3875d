# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

import dataclasses
import logging
import typing as tp
from abc import ABC, abstractmethod
from pathlib import Path

import hydra
import submitit
from omegaconf import DictConfig, OmegaConf

from jumpreflect.core import utils

if tp.TYPE_CHECKING:
    from jumpreflect.core.cache import Cache

# Set up a default logging handler.
logger = logging.getLogger("jumpreflect.module")
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s %(levelname)s %(process)d:%(name)s - %(message)s",
    datefmt="%Y-%m-%d %H:%M",
)


@dataclasses.dataclass
class Requirements:
    nodes: int = 1
    mem_gb: tp.Optional[int] = None
    tasks_per_node: int = 1
    cpus_per_task: int = 1
    timeout_min: int = 60
    constraint: tp.Optional[str] = None


class LabModule(ABC):
    """
    A unit of numerical work that the Launcher can run locally, in process or on
    a cluster. Subclasses declare a structured config, what they need to run and
    optionally an array of values to fan out over.
    """

    # list of retries per index
    retry_counts: tp.List[int]

    @staticmethod
    def build(config: tp.Any, **kwargs) -> "LabModule":
        """Builds the module named by the `_target_` entry of a loaded config."""
        assert hasattr(
            config, "_target_"
        ), "You need to specify the module to create in the yaml file with _target_"
        target = config._target_
        if kwargs:
            config = OmegaConf.merge(config, kwargs)
        # instantiate detaches the node from its parent, resolve interpolations first
        OmegaConf.resolve(config)
        return hydra.utils.instantiate(  # type: ignore[no-any-return]
            {"_target_": target}, config, _recursive_=False
        )

    def __init__(
        self, config: tp.Any, config_class: tp.Optional[tp.Type[tp.Any]] = None
    ):
        if dataclasses.is_dataclass(config):
            config = OmegaConf.structured(config)
        if config_class is not None:
            self.config = utils.promote_config(config, config_class)
        else:
            assert isinstance(config, DictConfig), (
                "module configs must be either a dataclass or a omegaconf.DictConfig."
                f" Received a {type(config)}"
            )
            self.config = config
        OmegaConf.resolve(self.config)
        OmegaConf.set_readonly(self.config, True)
        self.retry_counts = [0]

    def __call__(
        self,
        iteration_value: tp.Optional[tp.Any] = None,
        iteration_index: int = 0,
        cache: tp.Optional["Cache"] = None,
    ) -> tp.Any:
        """
        entry point of the submitted job, implement `run` instead.
        """
        res = self.run(iteration_value=iteration_value, iteration_index=iteration_index)
        if cache is not None:
            cache.save_cache(self, res, iteration_value, iteration_index)
        return res

    @abstractmethod
    def run(
        self,
        iteration_value: tp.Optional[tp.Any] = None,
        iteration_index: int = 0,
    ) -> tp.Any:
        """
        the numerical work. For array modules this is called once per value of
        `array()`, otherwise `iteration_value` is None.
        """
        ...

    def array(self) -> tp.Optional[tp.List[tp.Any]]:
        """values to fan out over as an array job, None for a single job"""
        return None

    @abstractmethod
    def requirements(self) -> Requirements:
        ...

    def name(self) -> str:
        return "_".join([self.__class__.__name__, self.sha_key()[:16]])

    def cache_key(self) -> tp.Tuple[tp.Any, ...]:
        return (
            self.__class__.__module__,
            self.__class__.__qualname__,
            self.version(),
            self.get_config_for_cache(),
        )

    def get_config_for_cache(self) -> tp.Dict[str, tp.Any]:
        """
        The config as a plain dict, minus the keys that do not change results:
        timeouts and the parallelism knobs.
        """
        config_for_cache = OmegaConf.to_container(self.config, resolve=True)
        assert isinstance(config_for_cache, dict), "module config must be a dict"
        ignored = {"timeout_min", "jobs"}

        def scrub(dct: tp.Dict[str, tp.Any]) -> None:
            for k in list(dct):
                if isinstance(dct[k], dict):
                    scrub(dct[k])
                elif k in ignored:
                    dct[k] = None

        scrub(config_for_cache)
        return config_for_cache

    def sha_key(self) -> str:
        return utils.sha_key(repr(self.cache_key()))

    @classmethod
    def version(cls) -> str:
        """bump to invalidate cached results of this module"""
        return "0.1"

    def validate(
        self,
        output: tp.Any,
        iteration_value: tp.Optional[tp.Any] = None,
        iteration_index: int = 0,
    ) -> bool:
        """
        Check a (cached or fresh) result. Results pointing at files that have
        since disappeared are invalid.
        """
        paths: tp.List[Path] = []
        if isinstance(output, Path):
            paths = [output]
        elif isinstance(output, dict):
            paths = [v for v in output.values() if isinstance(v, Path)]
        for path in paths:
            if not path.exists():
                logger.warning(
                    f"{self.name()} iteration {iteration_index}"
                    f" points to missing file {path}, will invalidate it."
                )
                return False
        return True

    def should_retry(
        self,
        ex: Exception,
        attempt: int,
        iteration_value: tp.Optional[tp.Any] = None,
        iteration_index: int = 0,
    ) -> bool:
        # only scheduler losses are retried, numerical failures are deterministic
        if isinstance(ex, submitit.core.utils.UncompletedJobError):
            return "has not produced any output" in str(ex)
        return False
