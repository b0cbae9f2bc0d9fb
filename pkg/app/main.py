import argparse
import logging
import sys
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from app.routers import EXIT_FAILURE, EXIT_USAGE, audit, device, trace
from app.services.bench_service import BenchError
from app.services.blockstore import BlockStoreError
from app.services.fs_common import FsError
from app.services.formatter import FormatError
from app.services.log_writer import NameCollision, WriterError
from app.services.nbd_service import NbdError
from app.services.rfs_engine import EngineError
from app.services.seal_store import SealStoreError
from app.services.trace_service import TraceError
from app.utils.logger import setup_logging
from app.utils.settings import ConfigError, load_device_config

logger = logging.getLogger(__name__)

USAGE_ERRORS = (ConfigError, ValidationError, BenchError, NameCollision)
DOMAIN_ERRORS = (BlockStoreError, NbdError, FsError, FormatError, WriterError, SealStoreError, EngineError,
                 TraceError)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat KEY=VALUE device configuration file")
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    common.add_argument("--log-json", action="store_true", help="line-delimited JSON logs on stderr")
    common.add_argument("--json", action="store_true", help="line-delimited JSON report on stdout")

    parser = argparse.ArgumentParser(prog="worm", description="WORM log device with a reverse file system")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for router in (device.router, audit.router, trace.router):
        router.register(subparsers, parents=[common])
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else 0

    setup_logging("DEBUG" if args.verbose else "INFO", json_output=args.log_json)

    def load_config():
        config = load_device_config(args.config)
        setup_logging("DEBUG" if args.verbose else config.log_level, json_output=args.log_json or config.log_json)
        return config

    try:
        return args.handler(args, load_config)
    except USAGE_ERRORS as e:
        logger.error(f"❌ {e}")
        return EXIT_USAGE
    except DOMAIN_ERRORS as e:
        logger.error(f"❌ {e}")
        return EXIT_FAILURE
    except KeyboardInterrupt:
        logger.warning("⏹️ Interrupted")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
