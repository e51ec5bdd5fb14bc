from .app import StructMarkApp, build_parser
