import socket
import threading

import pytest

from app.models.schemas import ExportConfig
from app.services.blockstore import create_image, open_image
from app.services.nbd_client import NbdClient, OptionError, ReplyError
from app.services.nbd_service import (
    EINVAL,
    ENOTSUP,
    EPERM,
    FLAG_READ_ONLY,
    MAX_REQUEST_LENGTH,
    REP_ERR_UNKNOWN,
    REQUEST,
    REQUEST_MAGIC,
    Command,
    NbdError,
    NbdRequest,
    NbdServer,
    ProtocolError,
    UnknownCommand,
    decode_request,
    encode_request,
)

SIZE = 1024 * 1024


@pytest.fixture
def image(tmp_path):
    path = str(tmp_path / "disk.img")
    create_image(path, SIZE)
    img = open_image(path)
    yield img
    img.close()


def start_session(server: NbdServer):
    server_sock, client_sock = socket.socketpair(socket.AF_UNIX, socket.SOCK_STREAM)
    outcome = {}

    def run():
        outcome["value"] = server._run_session(server_sock, negotiated=False)

    thread = threading.Thread(target=run, daemon=True)
    thread.start()
    return thread, client_sock, outcome


def connect(server: NbdServer, export_name: str = "worm"):
    thread, client_sock, outcome = start_session(server)
    return NbdClient(client_sock, export_name), thread, outcome


def test_decode_request_validation():
    header = encode_request(Command.READ, 7, offset=512, length=4096)
    request = decode_request(header)
    assert (request.command, request.cookie, request.offset, request.length) == (Command.READ, 7, 512, 4096)

    with pytest.raises(ProtocolError):
        decode_request(REQUEST.pack(0xDEADBEEF, 0, 0, 1, 0, 0))
    with pytest.raises(ProtocolError):
        decode_request(encode_request(Command.WRITE, 1, length=0))
    with pytest.raises(ProtocolError):
        decode_request(encode_request(Command.READ, 1, length=MAX_REQUEST_LENGTH + 1))
    with pytest.raises(UnknownCommand):
        decode_request(REQUEST.pack(REQUEST_MAGIC, 0, 42, 9, 0, 0))


def test_handle_request_reply_codes(image):
    server = NbdServer(image, ExportConfig(size_bytes=SIZE))
    write = NbdRequest(REQUEST_MAGIC, 0, Command.WRITE, 1, 4096, 3, b"abc")
    assert server.handle_request(write).error == 0
    read = server.handle_request(NbdRequest(REQUEST_MAGIC, 0, Command.READ, 2, 4096, 3))
    assert (read.error, read.payload) == (0, b"abc")
    assert server.handle_request(NbdRequest(REQUEST_MAGIC, 0, Command.READ, 3, SIZE - 1, 2)).error == EINVAL
    assert server.handle_request(NbdRequest(REQUEST_MAGIC, 0, Command.WRITE, 4, SIZE, 1, b"x")).error == EINVAL
    assert server.handle_request(NbdRequest(REQUEST_MAGIC, 0, Command.FLUSH, 5, 0, 0)).error == 0
    assert server.handle_request(NbdRequest(REQUEST_MAGIC, 0, Command.TRIM, 6, 0, 4096)).error == ENOTSUP


def test_gate_and_read_only_refuse_writes(image):
    server = NbdServer(image, ExportConfig(size_bytes=SIZE), gate=lambda request: False)
    reply = server.handle_request(NbdRequest(REQUEST_MAGIC, 0, Command.WRITE, 1, 0, 1, b"x"))
    assert reply.error == EPERM
    read_only = NbdServer(image, ExportConfig(size_bytes=SIZE, read_only=True))
    reply = read_only.handle_request(NbdRequest(REQUEST_MAGIC, 0, Command.WRITE, 2, 0, 1, b"x"))
    assert reply.error == EPERM
    assert image.last_seq == 0


def test_export_size_must_match_image(image):
    with pytest.raises(NbdError):
        NbdServer(image, ExportConfig(size_bytes=SIZE * 2))


def test_negotiated_session_round_trip(image):
    server = NbdServer(image, ExportConfig(size_bytes=SIZE))
    client, thread, outcome = connect(server)
    assert client.export_size == SIZE
    assert not client.transmission_flags & FLAG_READ_ONLY
    client.write(8192, b"over the wire")
    client.flush()
    assert client.read(8192, 13) == b"over the wire"
    with pytest.raises(ReplyError) as error:
        client.trim(0, 4096)
    assert error.value.code == ENOTSUP
    with pytest.raises(ReplyError) as error:
        client.read(SIZE, 1)
    assert error.value.code == EINVAL
    client.close()
    thread.join(timeout=5)
    assert outcome["value"] == "client-closed"
    assert image.read_raw(8192, 13) == b"over the wire"


def test_read_only_export_flag(image):
    server = NbdServer(image, ExportConfig(size_bytes=SIZE, read_only=True))
    client, thread, _ = connect(server)
    assert client.transmission_flags & FLAG_READ_ONLY
    with pytest.raises(ReplyError) as error:
        client.write(0, b"no")
    assert error.value.code == EPERM
    client.close()
    thread.join(timeout=5)


def test_unknown_export_is_refused(image):
    server = NbdServer(image, ExportConfig(size_bytes=SIZE))
    thread, client_sock, outcome = start_session(server)
    with pytest.raises(OptionError) as error:
        NbdClient(client_sock, "nope")
    assert error.value.code == REP_ERR_UNKNOWN
    thread.join(timeout=5)
    assert outcome["value"] == "negotiation-failed"
    client_sock.close()


def test_reads_go_through_the_read_hook(image):
    image.write(0, b"real")
    server = NbdServer(image, ExportConfig(size_bytes=SIZE), read=lambda offset, length: b"R" * length)
    reply = server.handle_request(NbdRequest(REQUEST_MAGIC, 0, Command.READ, 1, 0, 4))
    assert reply.payload == b"RRRR"


def test_unix_listener_serves_one_client(image, tmp_path):
    endpoint = f"unix:{tmp_path / 'nbd.sock'}"
    server = NbdServer(image, ExportConfig(size_bytes=SIZE, listen=endpoint))
    server.start()
    try:
        client = NbdClient.connect(endpoint, "worm")
        client.write(0, b"listener")
        assert client.read(0, 8) == b"listener"
        client.close()
    finally:
        server.stop()
    assert image.read_raw(0, 8) == b"listener"
