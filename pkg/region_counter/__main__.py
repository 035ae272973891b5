import logging
import sys

from . import LOG_LEVEL
from .cli import main as cli_main
from .cli import set_log_level
from .errors import ConfigError


logger = logging.getLogger("regioncounter")


def main() -> int:
    root_logger = logging.getLogger()
    handler = logging.StreamHandler()
    handler.setFormatter(
        logging.Formatter("%(asctime)s:%(levelname)s:%(name)s: %(message)s")
    )
    root_logger.addHandler(handler)
    try:
        set_log_level(LOG_LEVEL)
    except ConfigError as e:
        logger.error(f"Config error: REGION_COUNTER_LOG_LEVEL: {e}")
        return 2
    return cli_main()


if __name__ == "__main__":
    sys.exit(main())
