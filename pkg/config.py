"""Application Configuration Module."""

import os
from dotenv import load_dotenv


load_dotenv()

LOG_LEVEL = os.environ.get("LOG_LEVEL", "INFO")
SENTRY_DSN = os.environ.get("SENTRY_DSN", "")

TORCH_DEVICE = os.environ.get("TORCH_DEVICE", "cpu")
TORCH_THREADS = int(os.environ.get("TORCH_THREADS", "1"))
DETERMINISTIC = os.environ.get("DETERMINISTIC", "1") == "1"

RUNS_DIR = os.environ.get("RUNS_DIR", "runs")
