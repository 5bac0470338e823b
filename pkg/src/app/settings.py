import logging
import os
import random

import numpy as np
import torch
from dotenv import load_dotenv

load_dotenv()

DEVICE = os.getenv("TRACKER_DEVICE", "cpu")
LOG_LEVEL = os.getenv("TRACKER_LOG_LEVEL", "INFO")
NUM_THREADS = int(os.getenv("TRACKER_NUM_THREADS", "1"))
OUTPUT_DIR = os.getenv("TRACKER_OUTPUT_DIR", "runs")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str | None = None):
    root = logging.getLogger()
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
    root.setLevel((level or LOG_LEVEL).upper())


def configure_torch(seed: int):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.set_num_threads(NUM_THREADS)
    torch.use_deterministic_algorithms(True, warn_only=True)


def get_device() -> torch.device:
    return torch.device(DEVICE)
