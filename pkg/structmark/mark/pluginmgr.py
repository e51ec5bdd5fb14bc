import logging

LOGGER = logging.getLogger(__name__)


class StructMarkBehavior:
  """
  Process-wide registries. Modules register their handlers at import time, the
  same way new handlers are added from outside without touching call sites.
  """

  # Dictionary of {topology name: builder(n_residues, rng) -> (n, 3) coordinates}
  TOPOLOGIES = {}

  # Dictionary of {augmentation kind: AugmentationSpec subclass}
  AUGMENTATION_TYPES = {}

  # Dictionary of {attack kind: AttackSpec subclass}
  ATTACK_TYPES = {}

  # Dictionary of {subcommand: (handler(app, args) -> int, configure(parser))}
  COMMAND_HANDLERS = {}

  @staticmethod
  def register(registry: dict, name: str, handler, replace: bool = False):
    """
    Registers a handler under `name`.

    Args:
        registry (dict): One of the registries above.
        name (str): Key the handler is found under.
        handler: Class or callable to register.
        replace (bool): Allow overriding an existing registration.
    """
    if name in registry and not replace:
      LOGGER.warning(f"Handler '{name}' is already registered; keeping {registry[name]}.")
      return
    registry[name] = handler
