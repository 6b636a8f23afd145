import funcnodes_core as fn

HOMLAB_LOGGER = fn.get_logger("homlab")


def get_module_logger(name: str):
    return HOMLAB_LOGGER.getChild(name)
