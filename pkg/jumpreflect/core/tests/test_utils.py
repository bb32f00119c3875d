# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import omegaconf
import pytest
from omegaconf import OmegaConf

from jumpreflect.core import utils


def test_batch():
    items = list(range(10))
    listify = lambda items: [list(item) for item in items]  # noqa

    assert listify(utils.batch([], 1)) == []
    assert listify(utils.batch(items, 3)) == [[0, 1, 2], [3, 4, 5], [6, 7, 8], [9]]
    assert listify(utils.batch(items, 4)) == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9]]
    assert listify(utils.batch(items, 20)) == [items]


def test_split_in():
    items = list(range(10))
    assert utils.split_in([], 3) == []
    assert utils.split_in(items, 1) == [items]
    assert utils.split_in(items, 3) == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9]]
    # never more parts than items
    assert utils.split_in(items[:2], 5) == [[0], [1]]
    assert sum(utils.split_in(items, 4), []) == items


def test_open_write_renames_on_success(tmp_path: Path):
    output = tmp_path / "curve.csv"
    with utils.open_write(output) as o:
        o.write("t,K\n0,0\n")
        assert not output.exists()
    assert output.read_text() == "t,K\n0,0\n"
    assert list(tmp_path.iterdir()) == [output]


def test_open_write_leaves_nothing_on_failure(tmp_path: Path):
    output = tmp_path / "curve.csv"
    with pytest.raises(RuntimeError):
        with utils.open_write(output) as o:
            o.write("t,K\n")
            raise RuntimeError("solver blew up")
    assert list(tmp_path.iterdir()) == []


def test_open_write_keeps_previous_artifact_on_failure(tmp_path: Path):
    output = tmp_path / "report.json"
    utils.write_json(output, {"K_T": 0.5})
    with pytest.raises(RuntimeError):
        with utils.open_write(output) as o:
            o.write("{")
            raise RuntimeError()
    assert json.loads(output.read_text()) == {"K_T": 0.5}


def test_write_json_numpy_values(tmp_path: Path):
    output = utils.write_json(
        tmp_path / "report.json",
        {
            "times": np.linspace(0, 1, 3),
            "steps": np.int64(4),
            "csv": tmp_path / "k.csv",
        },
    )
    assert json.loads(output.read_text()) == {
        "times": [0.0, 0.5, 1.0],
        "steps": 4,
        "csv": str(tmp_path / "k.csv"),
    }


@dataclass
class ToyConfig:
    steps: int = 4
    horizon: float = 1.0


def test_promote_config():
    config = OmegaConf.create({"_target_": "toy.Module", "steps": 8})
    promoted = utils.promote_config(config, ToyConfig)
    assert promoted.steps == 8
    assert promoted.horizon == 1.0
    assert "_target_" not in promoted

    with pytest.raises(omegaconf.errors.ConfigKeyError):
        utils.promote_config(OmegaConf.create({"stpes": 8}), ToyConfig)
    with pytest.raises(omegaconf.errors.ValidationError):
        utils.promote_config(OmegaConf.create({"steps": "many"}), ToyConfig)


def test_sha_key_is_stable():
    assert utils.sha_key("abc") == utils.sha_key("abc")
    assert utils.sha_key("abc") != utils.sha_key("abd")
    assert len(utils.sha_key("")) == 64


def test_measure_logs(caplog):
    logger = logging.getLogger("jumpreflect.test")
    with caplog.at_level(logging.INFO, logger="jumpreflect.test"):
        with utils.measure("solving", logger):
            pass
    assert "solving" in caplog.messages[0]
    assert caplog.messages[1].startswith("solving done in")
