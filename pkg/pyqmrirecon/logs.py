"""
logger setup for the command line tools
"""

import logging
import logging.handlers


PACKAGE_LOGGER = 'pyqmrirecon'
FILE_FORMAT = '%(asctime)s %(name)s %(levelname)s %(message)s'
MAX_LOG_BYTES = 1000000


def setup_file_handler(logger, outputpath):
    """
    add a rotating file handler to a logger

    Args:
        logger(logging.Logger): the logger to add the handler to
        outputpath(str): path to save to

    Returns:
        rotatinghandler(logging.handlers.RotatingFileHandler): the handler
    """
    logformatter = logging.Formatter(fmt=FILE_FORMAT)
    rotatinghandler = logging.handlers.RotatingFileHandler(
        outputpath, maxBytes=MAX_LOG_BYTES)
    rotatinghandler.setFormatter(logformatter)
    logger.addHandler(rotatinghandler)
    return rotatinghandler


def setup_logging(verbose=False, logpath=None):
    """
    configure the package logger, console output at INFO (DEBUG when
    verbose) and optionally a rotating log file

    Args:
        verbose(bool): log solver iterations as well
        logpath(str): path of the log file, no file if None

    Returns:
        logger(logging.Logger): the package logger
    """
    logger = logging.getLogger(PACKAGE_LOGGER)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    console = logging.StreamHandler()
    console.setFormatter(logging.Formatter(fmt='%(levelname)s %(message)s'))
    logger.addHandler(console)
    if logpath:
        setup_file_handler(logger, logpath)
    logger.propagate = False
    return logger
