import errno
import fcntl
import logging
import os
import socket
import struct
import threading
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Optional

from app.models.schemas import ExportConfig
from app.services.blockstore import BlockImage, BlockStoreError, OutOfRange
from app.utils.helpers import parse_endpoint

logger = logging.getLogger(__name__)

# Magic numbers.
NBDMAGIC = 0x4e42444d41474943
IHAVEOPT = 0x49484156454F5054
OPTION_REPLY_MAGIC = 0x3e889045565a9
REQUEST_MAGIC = 0x25609513
SIMPLE_REPLY_MAGIC = 0x67446698

# Handshake flags
FLAG_FIXED_NEWSTYLE = 1
FLAG_NO_ZEROES = 2
FLAG_C_FIXED_NEWSTYLE = 1
FLAG_C_NO_ZEROES = 2

# Transmission flags
FLAG_HAS_FLAGS = (1 << 0)
FLAG_READ_ONLY = (1 << 1)
FLAG_SEND_FLUSH = (1 << 2)
FLAG_SEND_TRIM = (1 << 5)

# Options
OPT_EXPORT_NAME = 1
OPT_ABORT = 2
OPT_LIST = 3
OPT_INFO = 6
OPT_GO = 7

# Replies
REP_ACK = 1
REP_SERVER = 2
REP_INFO = 3
ERR_BASE = 2**31
REP_ERR_UNSUP = ERR_BASE + 1
REP_ERR_INVALID = ERR_BASE + 3
REP_ERR_UNKNOWN = ERR_BASE + 6

INFO_EXPORT = 0
INFO_BLOCK_SIZE = 3

# Reply error values
EPERM = errno.EPERM          # 1
EIO = errno.EIO              # 5
EINVAL = errno.EINVAL        # 22
ENOTSUP = 95

MAX_REQUEST_LENGTH = 32 * 1024 * 1024
MAX_OPTION_LENGTH = 64 * 1024
ZERO_PAD = 124

HANDSHAKE = struct.Struct("!QQH")
OPTION = struct.Struct("!QII")
OPTION_REPLY = struct.Struct("!QIII")
REQUEST = struct.Struct("!IHHQQI")
REPLY = struct.Struct("!IIQ")

# Kernel NBD ioctls (linux/nbd.h)
NBD_SET_SOCK = 0xab00
NBD_SET_BLKSIZE = 0xab01
NBD_DO_IT = 0xab03
NBD_CLEAR_SOCK = 0xab04
NBD_SET_SIZE_BLOCKS = 0xab07
NBD_DISCONNECT = 0xab08
NBD_SET_FLAGS = 0xab0a


class Command(IntEnum):
    READ = 0
    WRITE = 1
    DISC = 2
    FLUSH = 3
    TRIM = 4


class Error(Exception):
    fmt = "{self.reason}"

    def __init__(self, reason=""):
        self.reason = reason

    def __str__(self):
        return self.fmt.format(self=self)


class NbdError(Error):
    pass


class ProtocolError(NbdError):
    """Peer violated the protocol; the connection must be terminated."""


class UnknownExport(NbdError):
    fmt = "Unknown export {self.reason!r}"


class SessionAborted(NbdError):
    fmt = "Client aborted negotiation"


class UnknownCommand(NbdError):
    fmt = "Unknown command {self.command} (cookie {self.cookie})"

    def __init__(self, command, cookie):
        self.command = command
        self.cookie = cookie


class EndpointBusy(NbdError):
    fmt = "Endpoint busy: {self.reason}"


@dataclass
class NbdRequest:
    magic: int
    flags: int
    command: Command
    cookie: int
    offset: int
    length: int
    payload: bytes = b""

    @property
    def end(self) -> int:
        return self.offset + self.length


@dataclass
class NbdReply:
    error: int
    cookie: int
    payload: bytes = b""

    def to_bytes(self) -> bytes:
        return REPLY.pack(SIMPLE_REPLY_MAGIC, self.error, self.cookie) + self.payload


@dataclass
class NbdSession:
    sock: socket.socket
    export: ExportConfig
    client_flags: int = FLAG_C_FIXED_NEWSTYLE

    @property
    def transmission_flags(self) -> int:
        flags = FLAG_HAS_FLAGS | FLAG_SEND_FLUSH
        if self.export.read_only:
            flags |= FLAG_READ_ONLY
        return flags


def decode_request(header: bytes) -> NbdRequest:
    """Parse one 28-byte request header (payload is read separately)"""
    if len(header) != REQUEST.size:
        raise ProtocolError(f"Short request header ({len(header)} bytes)")
    magic, flags, kind, cookie, offset, length = REQUEST.unpack(header)
    if magic != REQUEST_MAGIC:
        raise ProtocolError(f"Bad request magic {magic:x}, expecting {REQUEST_MAGIC:x}")
    try:
        command = Command(kind)
    except ValueError:
        raise UnknownCommand(kind, cookie)
    if length > MAX_REQUEST_LENGTH:
        raise ProtocolError(f"Request length {length} exceeds {MAX_REQUEST_LENGTH}")
    if command == Command.WRITE and length == 0:
        raise ProtocolError("Zero-length WRITE")
    return NbdRequest(magic, flags, command, cookie, offset, length)


def encode_request(command: Command, cookie: int, offset: int = 0, length: int = 0, flags: int = 0) -> bytes:
    return REQUEST.pack(REQUEST_MAGIC, flags, int(command), cookie, offset, length)


def recv_exact(sock: socket.socket, length: int) -> bytes:
    buf = bytearray(length)
    with memoryview(buf) as view:
        pos = 0
        while pos < length:
            n = sock.recv_into(view[pos:])
            if not n:
                raise ConnectionResetError(f"Peer closed the connection, read {pos} of {length} bytes")
            pos += n
    return bytes(buf)


def _send_option_reply(sock, option: int, reply: int, data: bytes = b""):
    sock.sendall(OPTION_REPLY.pack(OPTION_REPLY_MAGIC, option, reply, len(data)) + data)


def _parse_info_request(data: bytes):
    if len(data) < 6:
        raise ProtocolError(f"Option data too short ({len(data)} bytes)")
    (name_length,) = struct.unpack_from("!I", data, 0)
    if name_length > len(data) - 6:
        raise ProtocolError("Export name overruns option data")
    name = data[4:4 + name_length].decode("utf-8", errors="replace")
    (count,) = struct.unpack_from("!H", data, 4 + name_length)
    requests = struct.unpack_from(f"!{count}H", data, 6 + name_length) if count else ()
    return name, requests


def negotiate(sock: socket.socket, cfg: ExportConfig) -> NbdSession:
    """Fixed-newstyle handshake; returns once the client enters transmission"""
    sock.sendall(HANDSHAKE.pack(NBDMAGIC, IHAVEOPT, FLAG_FIXED_NEWSTYLE | FLAG_NO_ZEROES))
    (client_flags,) = struct.unpack("!I", recv_exact(sock, 4))
    if client_flags & ~(FLAG_C_FIXED_NEWSTYLE | FLAG_C_NO_ZEROES) or not client_flags & FLAG_C_FIXED_NEWSTYLE:
        raise ProtocolError(f"Bad client flags {client_flags:x}")
    session = NbdSession(sock=sock, export=cfg, client_flags=client_flags)
    logger.debug(f"🤝 Client flags {client_flags:x}")

    while True:
        magic, option, length = OPTION.unpack(recv_exact(sock, OPTION.size))
        if magic != IHAVEOPT:
            raise ProtocolError(f"Bad option magic {magic:x}")
        if length > MAX_OPTION_LENGTH:
            raise ProtocolError(f"Option length {length} too large")
        data = recv_exact(sock, length) if length else b""
        logger.debug(f"🤝 Option {option} ({length} bytes)")

        if option == OPT_EXPORT_NAME:
            name = data.decode("utf-8", errors="replace")
            if name not in ("", cfg.export_name):
                # No error reply exists for this option: the server just hangs up.
                raise UnknownExport(name)
            reply = struct.pack("!QH", cfg.size_bytes, session.transmission_flags)
            if not client_flags & FLAG_C_NO_ZEROES:
                reply += bytes(ZERO_PAD)
            sock.sendall(reply)
            return session

        if option == OPT_ABORT:
            _send_option_reply(sock, option, REP_ACK)
            raise SessionAborted()

        if option == OPT_LIST:
            if data:
                _send_option_reply(sock, option, REP_ERR_INVALID)
                continue
            name = cfg.export_name.encode("utf-8")
            _send_option_reply(sock, option, REP_SERVER, struct.pack("!I", len(name)) + name)
            _send_option_reply(sock, option, REP_ACK)
            continue

        if option in (OPT_INFO, OPT_GO):
            name, requests = _parse_info_request(data)
            if name not in ("", cfg.export_name):
                _send_option_reply(sock, option, REP_ERR_UNKNOWN, b"Unknown export")
                if option == OPT_GO:
                    raise UnknownExport(name)
                continue
            _send_option_reply(sock, option, REP_INFO,
                               struct.pack("!HQH", INFO_EXPORT, cfg.size_bytes, session.transmission_flags))
            if INFO_BLOCK_SIZE in requests:
                _send_option_reply(sock, option, REP_INFO,
                                   struct.pack("!HIII", INFO_BLOCK_SIZE, 1, 4096, MAX_REQUEST_LENGTH))
            _send_option_reply(sock, option, REP_ACK)
            if option == OPT_GO:
                return session
            continue

        _send_option_reply(sock, option, REP_ERR_UNSUP)


class NbdServer:
    """Serves one BlockImage as a single NBD export"""

    def __init__(self, image: BlockImage, cfg: ExportConfig,
                 gate: Optional[Callable[[NbdRequest], bool]] = None,
                 read: Optional[Callable[[int, int], bytes]] = None):
        if cfg.size_bytes != image.capacity_bytes:
            raise NbdError(f"Export size {cfg.size_bytes} != image capacity {image.capacity_bytes}")
        self.image = image
        self.cfg = cfg
        self.gate = gate
        self.read = read or image.read_raw
        self._listener: Optional[socket.socket] = None
        self._session_lock = threading.Lock()
        self._active: Optional[socket.socket] = None
        self._stopping = threading.Event()
        self._accept_thread: Optional[threading.Thread] = None
        self.sessions_served = 0
        self.last_outcome: Optional[str] = None

    # Request dispatch

    def handle_request(self, request: NbdRequest) -> NbdReply:
        cookie = request.cookie

        if request.command == Command.READ:
            try:
                return NbdReply(0, cookie, self.read(request.offset, request.length))
            except OutOfRange:
                return NbdReply(EINVAL, cookie)
            except BlockStoreError as e:
                logger.error(f"❌ Read failed at {request.offset}: {e}")
                return NbdReply(EIO, cookie)

        if request.command == Command.WRITE:
            if request.end > self.image.capacity_bytes:
                return NbdReply(EINVAL, cookie)
            if self.cfg.read_only:
                return NbdReply(EPERM, cookie)
            if self.gate is not None and not self.gate(request):
                return NbdReply(EPERM, cookie)
            try:
                self.image.write(request.offset, request.payload)
            except OutOfRange:
                return NbdReply(EINVAL, cookie)
            except BlockStoreError as e:
                logger.error(f"❌ Write failed at {request.offset}: {e}")
                return NbdReply(EIO, cookie)
            return NbdReply(0, cookie)

        if request.command == Command.FLUSH:
            try:
                self.image.flush()
            except BlockStoreError as e:
                logger.error(f"❌ Flush failed: {e}")
                return NbdReply(EIO, cookie)
            return NbdReply(0, cookie)

        if request.command == Command.TRIM:
            return NbdReply(ENOTSUP, cookie)

        return NbdReply(EINVAL, cookie)

    def serve_transmission(self, sock: socket.socket) -> str:
        """Request loop; returns the session outcome"""
        try:
            while True:
                header = recv_exact(sock, REQUEST.size)
                try:
                    request = decode_request(header)
                except UnknownCommand as e:
                    logger.warning(f"⚠️ {e}")
                    sock.sendall(NbdReply(EINVAL, e.cookie).to_bytes())
                    continue

                if request.command == Command.WRITE:
                    request.payload = recv_exact(sock, request.length)
                elif request.command == Command.DISC:
                    logger.info("👋 Client disconnected")
                    return "client-closed"

                sock.sendall(self.handle_request(request).to_bytes())
        except ProtocolError as e:
            logger.error(f"❌ Protocol error, terminating session: {e}")
            return "protocol-error"
        except (ConnectionError, OSError) as e:
            if self._stopping.is_set():
                return "server-stopped"
            logger.warning(f"⚠️ Connection lost: {e}")
            return "connection-lost"

    def serve_connection(self, sock: socket.socket) -> str:
        try:
            negotiate(sock, self.cfg)
        except (NbdError, ConnectionError, OSError) as e:
            logger.warning(f"⚠️ Negotiation failed: {e}")
            return "negotiation-failed"
        logger.info(f"🔌 Export '{self.cfg.export_name}' negotiated ({self.cfg.size_bytes} bytes)")
        return self.serve_transmission(sock)

    def serve_local(self, sock: socket.socket) -> str:
        """Local mode: transmission phase on an already connected socket"""
        return self._run_session(sock, negotiated=True)

    def _run_session(self, sock: socket.socket, negotiated: bool) -> str:
        try:
            outcome = self.serve_transmission(sock) if negotiated else self.serve_connection(sock)
        finally:
            try:
                sock.close()
            except OSError:
                pass
        self.sessions_served += 1
        self.last_outcome = outcome
        return outcome

    # Listener

    def start(self, endpoint: Optional[str] = None) -> socket.socket:
        transport, address = parse_endpoint(endpoint or self.cfg.listen)
        if transport == "unix":
            if os.path.exists(address):
                probe = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
                try:
                    probe.connect(address)
                    probe.close()
                    raise EndpointBusy(address)
                except (ConnectionRefusedError, FileNotFoundError):
                    os.unlink(address)
                finally:
                    probe.close()
            listener = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        elif transport == "tcp":
            listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        else:
            raise NbdError(f"Endpoint {endpoint!r} is not a listening transport")
        try:
            listener.bind(address)
        except OSError as e:
            listener.close()
            raise EndpointBusy(str(e)) from e
        listener.listen(4)
        self._listener = listener
        self._accept_thread = threading.Thread(target=self._accept_loop, name="nbd-accept", daemon=True)
        self._accept_thread.start()
        logger.info(f"🚀 NBD export '{self.cfg.export_name}' listening on {endpoint or self.cfg.listen}")
        return listener

    def _accept_loop(self):
        while not self._stopping.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            if not self._session_lock.acquire(blocking=False):
                logger.warning("⚠️ Refusing second connection: one session at a time")
                conn.close()
                continue
            self._active = conn
            threading.Thread(target=self._session_thread, args=(conn,), name="nbd-session", daemon=True).start()

    def _session_thread(self, conn: socket.socket):
        try:
            self._run_session(conn, negotiated=False)
        finally:
            self._active = None
            self._session_lock.release()

    def stop(self):
        self._stopping.set()
        if self._listener is not None:
            try:
                address = self._listener.getsockname()
                self._listener.close()
                if isinstance(address, str) and address and os.path.exists(address):
                    os.unlink(address)
            except OSError:
                pass
            self._listener = None
        active = self._active
        if active is not None:
            try:
                active.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=2)


class KernelAttachment:
    """Hands one end of a socketpair to /dev/nbdN and serves the other (root only)"""

    def __init__(self, server: NbdServer, device: str, block_size: int = 4096):
        self.server = server
        self.device = device
        self.block_size = block_size
        self._fd = -1
        self._threads = []

    def attach(self):
        ours, kernels = socket.socketpair(socket.AF_UNIX, socket.SOCK_STREAM)
        try:
            self._fd = os.open(self.device, os.O_RDWR)
        except OSError as e:
            ours.close()
            kernels.close()
            raise NbdError(f"Cannot open {self.device}: {e}") from e
        size = self.server.image.capacity_bytes
        fcntl.ioctl(self._fd, NBD_CLEAR_SOCK)
        fcntl.ioctl(self._fd, NBD_SET_BLKSIZE, self.block_size)
        fcntl.ioctl(self._fd, NBD_SET_SIZE_BLOCKS, size // self.block_size)
        fcntl.ioctl(self._fd, NBD_SET_FLAGS, FLAG_HAS_FLAGS | FLAG_SEND_FLUSH)
        fcntl.ioctl(self._fd, NBD_SET_SOCK, kernels.fileno())

        def do_it():
            try:
                fcntl.ioctl(self._fd, NBD_DO_IT)
            except OSError as e:
                logger.info(f"🔌 {self.device} released: {e}")
            finally:
                kernels.close()

        self._threads = [
            threading.Thread(target=do_it, name="nbd-do-it", daemon=True),
            threading.Thread(target=self.server.serve_local, args=(ours,), name="nbd-local", daemon=True),
        ]
        for thread in self._threads:
            thread.start()
        logger.info(f"🔗 Attached export to {self.device}")

    def detach(self):
        if self._fd < 0:
            return
        try:
            fcntl.ioctl(self._fd, NBD_DISCONNECT)
            fcntl.ioctl(self._fd, NBD_CLEAR_SOCK)
        except OSError as e:
            logger.warning(f"⚠️ Detach of {self.device} failed: {e}")
        for thread in self._threads:
            thread.join(timeout=5)
        os.close(self._fd)
        self._fd = -1
