"""Synthetic-data utility evaluation.

Utility is the performance of a small CNN classifier trained on synthetic
(or real+synthetic) images and evaluated on held-out real data: AUC-ROC for
the overall task plus per-subgroup accuracy.  This module also hosts the
selection machinery (top-k checkpoint epochs, coupling-weight grids), the
repeated-seed aggregation used for box statistics, and the cluster-coverage
statistic for the distribution-coverage experiments.

Selection operates on validation-tagged reports only; handing it a
test-tagged report raises, which is what keeps the test set out of every
model/hyperparameter choice.
"""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .федерация_import_guard import *  # noqa: F401,F403  (removed below; placeholder)
