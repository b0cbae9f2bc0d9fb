import argparse
import json
import sys
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def arg(*flags, **kwargs) -> Tuple[Tuple, dict]:
    return flags, kwargs


@dataclass
class Route:
    path: Tuple[str, ...]
    help: str
    arguments: Sequence[Tuple[Tuple, dict]]
    handler: Callable


@dataclass
class CommandRouter:
    """Collects CLI verbs the way an API router collects endpoints"""
    prefix: Optional[str] = None
    help: str = ""
    routes: List[Route] = field(default_factory=list)

    def command(self, name: str, help: str = "", arguments: Sequence[Tuple[Tuple, dict]] = ()):
        def decorator(handler: Callable):
            path = (self.prefix, name) if self.prefix else (name,)
            self.routes.append(Route(path, help, arguments, handler))
            return handler
        return decorator

    def register(self, subparsers, parents: Sequence[argparse.ArgumentParser] = ()):
        if self.prefix:
            group = subparsers.add_parser(self.prefix, help=self.help)
            subparsers = group.add_subparsers(dest="action", required=True)
        for route in self.routes:
            parser = subparsers.add_parser(route.path[-1], help=route.help, parents=list(parents))
            for flags, kwargs in route.arguments:
                parser.add_argument(*flags, **kwargs)
            parser.set_defaults(handler=route.handler)


def emit_lines(records, stream=None):
    """Line-delimited JSON, one record per line"""
    stream = stream or sys.stdout
    for record in records:
        stream.write(json.dumps(record, default=str, sort_keys=True) + "\n")
    stream.flush()
