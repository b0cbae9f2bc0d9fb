import itertools
import logging
import socket
import struct
import threading
from typing import Dict, Optional, Tuple

from app.services.nbd_service import (
    FLAG_C_FIXED_NEWSTYLE,
    FLAG_C_NO_ZEROES,
    FLAG_FIXED_NEWSTYLE,
    HANDSHAKE,
    IHAVEOPT,
    INFO_BLOCK_SIZE,
    INFO_EXPORT,
    NBDMAGIC,
    OPT_ABORT,
    OPT_GO,
    OPTION,
    OPTION_REPLY,
    OPTION_REPLY_MAGIC,
    REP_ACK,
    REP_INFO,
    REPLY,
    SIMPLE_REPLY_MAGIC,
    Command,
    Error,
    ProtocolError,
    encode_request,
    recv_exact,
)
from app.utils.helpers import parse_endpoint

logger = logging.getLogger(__name__)


class OptionError(Error):
    fmt = "Error negotiating option opt={self.opt} code={self.code:x}"

    def __init__(self, opt, code):
        self.opt = opt
        self.code = code


class ReplyError(Error):
    fmt = "Request {self.cookie} failed with error {self.code}"

    def __init__(self, code, cookie):
        self.code = code
        self.cookie = cookie


class NbdClient:
    """Minimal fixed-newstyle client (simple replies only)"""

    def __init__(self, sock: socket.socket, export_name: str = "", negotiate: bool = True):
        self._sock = sock
        self.export_name = export_name
        self.export_size: Optional[int] = None
        self.transmission_flags: Optional[int] = None
        self._counter = itertools.count(1)
        self._pending: Dict[int, Tuple[Command, int]] = {}
        self._lock = threading.Lock()
        if negotiate:
            self._newstyle_handshake()

    @classmethod
    def connect(cls, endpoint: str, export_name: str = "") -> "NbdClient":
        transport, address = parse_endpoint(endpoint)
        if transport == "unix":
            sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        elif transport == "tcp":
            sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        else:
            raise ProtocolError(f"Cannot connect to {endpoint!r}")
        sock.connect(address)
        return cls(sock, export_name)

    def _newstyle_handshake(self):
        nbd_magic, cliserv_magic, server_flags = HANDSHAKE.unpack(recv_exact(self._sock, HANDSHAKE.size))
        if nbd_magic != NBDMAGIC:
            raise ProtocolError(f"Bad nbd magic {nbd_magic:x}, expecting {NBDMAGIC:x}")
        if cliserv_magic != IHAVEOPT:
            raise ProtocolError(f"Server does not support newstyle negotiation magic={cliserv_magic:x}")
        if not server_flags & FLAG_FIXED_NEWSTYLE:
            raise ProtocolError("Server does not support fixed newstyle negotiation")
        self._sock.sendall(struct.pack("!I", FLAG_C_FIXED_NEWSTYLE | FLAG_C_NO_ZEROES))

        name = self.export_name.encode("utf-8")
        data = struct.pack("!I", len(name)) + name + struct.pack("!HH", 1, INFO_BLOCK_SIZE)
        self._send_option(OPT_GO, data)
        while True:
            reply, length = self._recv_option_reply(OPT_GO)
            payload = recv_exact(self._sock, length) if length else b""
            if reply & 0x80000000:
                raise OptionError(OPT_GO, reply)
            if reply == REP_ACK:
                break
            if reply != REP_INFO or len(payload) < 2:
                raise ProtocolError(f"Unexpected reply {reply} for GO")
            (info,) = struct.unpack_from("!H", payload)
            if info == INFO_EXPORT:
                self.export_size, self.transmission_flags = struct.unpack_from("!QH", payload, 2)
            elif info == INFO_BLOCK_SIZE:
                logger.debug(f"Block size constraints {struct.unpack_from('!III', payload, 2)}")
        if self.export_size is None:
            raise ProtocolError("Server did not send export size")

    def _send_option(self, opt: int, data: bytes = b""):
        self._sock.sendall(OPTION.pack(IHAVEOPT, opt, len(data)) + data)

    def _recv_option_reply(self, expected_option: int):
        magic, option, reply, length = OPTION_REPLY.unpack(recv_exact(self._sock, OPTION_REPLY.size))
        if magic != OPTION_REPLY_MAGIC:
            raise ProtocolError(f"Unexpected reply magic {magic:x}")
        if option != expected_option:
            raise ProtocolError(f"Unexpected reply option {option}, expecting {expected_option}")
        return reply, length

    def abort(self):
        self._send_option(OPT_ABORT)
        self._sock.close()

    # Pipelined interface

    def send(self, command: Command, offset: int = 0, length: int = 0, payload: bytes = b"") -> int:
        cookie = next(self._counter)
        if command == Command.WRITE:
            length = len(payload)
        with self._lock:
            self._pending[cookie] = (command, length)
            self._sock.sendall(encode_request(command, cookie, offset, length) + payload)
        return cookie

    def recv_reply(self) -> Tuple[int, int, bytes]:
        """Next reply as (cookie, error, payload)"""
        magic, error, cookie = REPLY.unpack(recv_exact(self._sock, REPLY.size))
        if magic != SIMPLE_REPLY_MAGIC:
            raise ProtocolError(f"Unexpected reply magic {magic:x}")
        pending = self._pending.pop(cookie, None)
        if pending is None:
            raise ProtocolError(f"Unexpected handle {cookie}")
        command, length = pending
        payload = b""
        if command == Command.READ and error == 0:
            payload = recv_exact(self._sock, length)
        return cookie, error, payload

    def _call(self, command: Command, offset: int = 0, length: int = 0, payload: bytes = b"") -> bytes:
        cookie = self.send(command, offset, length, payload)
        got, error, data = self.recv_reply()
        if got != cookie:
            raise ProtocolError(f"Unexpected handle {got}, expecting {cookie}")
        if error:
            raise ReplyError(error, cookie)
        return data

    # Simple interface

    def read(self, offset: int, length: int) -> bytes:
        return self._call(Command.READ, offset, length)

    def write(self, offset: int, data: bytes):
        self._call(Command.WRITE, offset, payload=data)

    def flush(self):
        self._call(Command.FLUSH)

    def trim(self, offset: int, length: int):
        self._call(Command.TRIM, offset, length)

    def close(self):
        try:
            self._sock.sendall(encode_request(Command.DISC, next(self._counter)))
        except OSError as e:
            logger.debug(f"Error sending disconnect: {e}")
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
