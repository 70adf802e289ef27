from dotenv import load_dotenv
import logging
import os

# Load environment variables
load_dotenv()

OUTPUT_DIR = os.getenv('CTTA_OUTPUT_DIR', 'runs')
LOG_LEVEL = os.getenv('CTTA_LOG_LEVEL', 'INFO').upper()
# Off by default so that equal (config, seed) pairs give byte-identical reports
REPORT_TIMING = os.getenv('CTTA_REPORT_TIMING', 'false').lower() == 'true'

_logging_configured = False


def configure_logging(level: str | None = None) -> None:
    """Install the root handler once; later calls only adjust the level."""
    global _logging_configured
    resolved = (level or LOG_LEVEL).upper()
    if not _logging_configured:
        logging.basicConfig(
            level=resolved,
            format="%(asctime)s %(levelname)s %(name)s | %(message)s",
        )
        _logging_configured = True
    else:
        logging.getLogger().setLevel(resolved)
