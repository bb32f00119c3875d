# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

from .cache import Cache as Cache
from .cache import FileCache as FileCache
from .cache import NoCache as NoCache
from .lab_module import LabModule as LabModule
from .lab_module import Requirements as Requirements
from .launcher import Launcher as Launcher
