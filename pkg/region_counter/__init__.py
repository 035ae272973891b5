import os

import dotenv

from .config import *


dotenv.load_dotenv()

DEFAULT_CONFIG_PATH = os.getenv("REGION_COUNTER_CONFIG")
LOG_LEVEL = os.getenv("REGION_COUNTER_LOG_LEVEL", "INFO")
