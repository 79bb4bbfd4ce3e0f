import logging
import sys

logger = logging.getLogger("gtguard")


def show_error_notification(title: str, message: str) -> None:
    """Report an error to the user on stderr."""
    logger.error("%s: %s", title, message)
    if not logger.hasHandlers():  # pragma: no cover - logging not configured
        print(f"{title}: {message}", file=sys.stderr)
