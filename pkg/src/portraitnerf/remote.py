"""Optional adapter that forwards denoising requests to an external service
over a local socket, using length-prefixed binary messages.

Message layout (all integers big-endian):

    request:  u64 request_id | u8 variant (0=uncond, 1=img, 2=full)
              | f32 t | u8 ndim | u32 x ndim dims
              | row-major f32 latent payload
              | u32 instruction byte length | utf-8 instruction
              | (variant >= 1) row-major f32 image payload, same dims as latent
    response: u64 request_id | u8 ndim | u32 x ndim dims | f32 eps payload

Never required by the pipeline: tests run against the toy denoiser; this
adapter exists so a real instruction-conditioned diffusion service can be
plugged in via ``--editor external``.
"""

from __future__ import annotations

import os
import socket
import struct
import threading

import numpy as np
import torch
from torch import Tensor

from .editing import Denoiser

VARIANT_UNCOND, VARIANT_IMG, VARIANT_FULL = 0, 1, 2

EDITOR_ADDR_ENV = "PORTRAITNERF_EDITOR_ADDR"


class WireFormatError(ValueError):
    pass


def _pack_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=">f4")
    head = struct.pack(">B", arr.ndim)
    head += struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def _unpack_tensor(buf: bytes, offset: int) -> tuple[np.ndarray, int]:
    (ndim,) = struct.unpack_from(">B", buf, offset)
    offset += 1
    dims = struct.unpack_from(f">{ndim}I", buf, offset)
    offset += 4 * ndim
    count = int(np.prod(dims)) if ndim else 1
    arr = np.frombuffer(buf, dtype=">f4", count=count, offset=offset)
    offset += 4 * count
    return arr.astype(np.float32).reshape(dims), offset


def pack_request(request_id: int, variant: int, t: float, latent: np.ndarray,
                 instruction: str = "", image: np.ndarray | None = None) -> bytes:
    if variant not in (VARIANT_UNCOND, VARIANT_IMG, VARIANT_FULL):
        raise WireFormatError(f"unknown variant {variant}")
    if variant >= VARIANT_IMG and image is None:
        raise WireFormatError("image payload required for conditioned variants")
    body = struct.pack(">QBf", request_id, variant, t)
    body += _pack_tensor(latent)
    instr = instruction.encode("utf-8")
    body += struct.pack(">I", len(instr)) + instr
    if variant >= VARIANT_IMG:
        body += _pack_tensor(image)
    return struct.pack(">I", len(body)) + body


def unpack_request(body: bytes) -> dict:
    try:
        request_id, variant, t = struct.unpack_from(">QBf", body, 0)
        latent, offset = _unpack_tensor(body, 13)
        (instr_len,) = struct.unpack_from(">I", body, offset)
        offset += 4
        instruction = body[offset:offset + instr_len].decode("utf-8")
        offset += instr_len
        image = None
        if variant >= VARIANT_IMG:
            image, offset = _unpack_tensor(body, offset)
    except (struct.error, UnicodeDecodeError, ValueError) as e:
        raise WireFormatError(f"malformed request: {e}") from e
    return {"request_id": request_id, "variant": variant, "t": t,
            "latent": latent, "instruction": instruction, "image": image}


def pack_response(request_id: int, eps: np.ndarray) -> bytes:
    body = struct.pack(">Q", request_id) + _pack_tensor(eps)
    return struct.pack(">I", len(body)) + body


def unpack_response(body: bytes) -> tuple[int, np.ndarray]:
    try:
        (request_id,) = struct.unpack_from(">Q", body, 0)
        eps, _ = _unpack_tensor(body, 8)
    except (struct.error, ValueError) as e:
        raise WireFormatError(f"malformed response: {e}") from e
    return request_id, eps


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(n)
        if not chunk:
            raise ConnectionError("connection closed mid-message")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_message(sock: socket.socket) -> bytes:
    (length,) = struct.unpack(">I", _recv_exact(sock, 4))
    return _recv_exact(sock, length)


class ExternalDenoiser(Denoiser):
    """Client for an external denoising service; calls are serialized."""

    concurrent_safe = False

    def __init__(self, address: str | None = None):
        address = address or os.environ.get(EDITOR_ADDR_ENV)
        if not address:
            raise ValueError(
                f"external editor address required (flag or {EDITOR_ADDR_ENV})")
        host, _, port = address.rpartition(":")
        self._sock = socket.create_connection((host or "127.0.0.1", int(port)))
        self._lock = threading.Lock()
        self._next_id = 0

    def close(self):
        self._sock.close()

    def denoise(self, z_t: Tensor, t: float, image_cond=None, text_cond=None):
        if image_cond is None:
            variant = VARIANT_UNCOND
        elif text_cond is None:
            variant = VARIANT_IMG
        else:
            variant = VARIANT_FULL
        with self._lock:
            rid = self._next_id
            self._next_id += 1
            msg = pack_request(
                rid, variant, t, z_t.detach().cpu().numpy(),
                instruction=text_cond or "",
                image=None if image_cond is None
                else image_cond.detach().cpu().numpy())
            self._sock.sendall(msg)
            got_id, eps = unpack_response(read_message(self._sock))
        if got_id != rid:
            raise WireFormatError(f"response id {got_id} != request id {rid}")
        return torch.as_tensor(eps, dtype=z_t.dtype).reshape(z_t.shape)


def serve_denoiser(denoise_fn, sock: socket.socket):
    """Serve one connection; ``denoise_fn(request_dict) -> eps array``.
    Returns when the peer disconnects. Intended for tests and local tools."""
    while True:
        try:
            req = unpack_request(read_message(sock))
        except ConnectionError:
            return
        eps = denoise_fn(req)
        sock.sendall(pack_response(req["request_id"], np.asarray(eps)))
