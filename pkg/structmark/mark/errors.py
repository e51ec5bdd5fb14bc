"""
Exception hierarchy for structmark.

Every error carries the process exit code the command line should use when it
escapes a subcommand.
"""


class StructMarkError(Exception):
  exit_code = 1


class ConfigError(StructMarkError):
  exit_code = 1


class MissingArtifactError(StructMarkError):
  exit_code = 2


class AcceptanceError(StructMarkError):
  exit_code = 3


class StructureError(StructMarkError):
  pass


class PDBParseError(StructureError):
  pass


class GeometryError(StructMarkError):
  pass


class ShapeError(StructMarkError):
  pass


class CodeLengthError(StructMarkError):
  pass


class AttackError(StructMarkError):
  pass


class CheckpointError(StructMarkError):
  pass


class IdentificationError(StructMarkError):
  pass
