# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

"""
jumpreflect is a numerical lab for mean-reflected backward SDEs driven by
compensated Poisson jumps: single equation, interacting particles and
propagation-of-chaos rate experiments.
"""

__version__ = "0.1.0"
