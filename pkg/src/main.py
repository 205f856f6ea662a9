import os
import sys

from dotenv import load_dotenv

import eval_cli
from enums import EnvironmentKeys
from utils import setup_logging

load_dotenv()


if __name__ == "__main__":
    setup_logging(os.getenv(EnvironmentKeys.LOG_LEVEL, "INFO"))
    try:
        sys.exit(eval_cli.main())
    except KeyboardInterrupt:
        print("Stopped manually")
        sys.exit(130)
