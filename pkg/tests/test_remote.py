import math
import socket
import threading

import numpy as np
import pytest
import torch

from portraitnerf.editing import DEFAULT_SCHEDULE, toy_denoiser, identity_transform
from portraitnerf.remote import (VARIANT_FULL, VARIANT_IMG, VARIANT_UNCOND,
                                 ExternalDenoiser, WireFormatError,
                                 pack_request, pack_response, read_message,
                                 serve_denoiser, unpack_request,
                                 unpack_response)


def _strip_length(msg: bytes) -> bytes:
    return msg[4:]


class TestWireFormat:
    def test_request_round_trip_full(self):
        latent = np.random.default_rng(0).normal(size=(4, 4, 3)).astype(np.float32)
        image = np.random.default_rng(1).normal(size=(4, 4, 3)).astype(np.float32)
        msg = pack_request(42, VARIANT_FULL, 0.5, latent, "turn hair pink", image)
        req = unpack_request(_strip_length(msg))
        assert req["request_id"] == 42
        assert req["variant"] == VARIANT_FULL
        assert abs(req["t"] - 0.5) < 1e-7
        assert np.array_equal(req["latent"], latent)
        assert np.array_equal(req["image"], image)
        assert req["instruction"] == "turn hair pink"

    def test_request_round_trip_uncond(self):
        latent = np.zeros((2, 2, 3), dtype=np.float32)
        req = unpack_request(_strip_length(
            pack_request(0, VARIANT_UNCOND, 0.25, latent)))
        assert req["image"] is None
        assert req["instruction"] == ""

    def test_response_round_trip(self):
        eps = np.random.default_rng(2).normal(size=(3, 3)).astype(np.float32)
        rid, got = unpack_response(_strip_length(pack_response(7, eps)))
        assert rid == 7
        assert np.array_equal(got, eps)

    def test_unicode_instruction(self):
        latent = np.zeros((2, 2), dtype=np.float32)
        msg = pack_request(1, VARIANT_FULL, 0.3, latent, "café ☕", latent)
        assert unpack_request(_strip_length(msg))["instruction"] == "café ☕"

    def test_image_required_for_conditioned_variants(self):
        with pytest.raises(WireFormatError):
            pack_request(0, VARIANT_IMG, 0.5, np.zeros((2, 2), np.float32))

    def test_unknown_variant_rejected(self):
        with pytest.raises(WireFormatError):
            pack_request(0, 9, 0.5, np.zeros((2, 2), np.float32))

    def test_malformed_request_rejected(self):
        with pytest.raises(WireFormatError):
            unpack_request(b"\x00\x01\x02")

    def test_malformed_response_rejected(self):
        with pytest.raises(WireFormatError):
            unpack_response(b"\x00")


class TestExternalDenoiser:
    @pytest.fixture
    def service(self):
        """Loopback server that answers with the toy denoiser's prediction."""
        toy = toy_denoiser(identity_transform)

        def denoise_fn(req):
            z_t = torch.as_tensor(req["latent"])
            image = None if req["image"] is None else torch.as_tensor(req["image"])
            text = req["instruction"] or None
            if req["variant"] == VARIANT_UNCOND:
                eps = toy.denoise(z_t, req["t"])
            elif req["variant"] == VARIANT_IMG:
                eps = toy.denoise(z_t, req["t"], image_cond=image)
            else:
                eps = toy.denoise(z_t, req["t"], image_cond=image, text_cond=text)
            return eps.numpy()

        listener = socket.create_server(("127.0.0.1", 0))
        port = listener.getsockname()[1]

        def run():
            conn, _ = listener.accept()
            with conn:
                serve_denoiser(denoise_fn, conn)

        thread = threading.Thread(target=run, daemon=True)
        thread.start()
        yield f"127.0.0.1:{port}"
        listener.close()
        thread.join(timeout=5)

    def test_matches_local_toy_denoiser(self, service):
        toy = toy_denoiser(identity_transform)
        client = ExternalDenoiser(service)
        gen = torch.Generator().manual_seed(0)
        z_t = torch.randn(4, 4, 3, generator=gen)
        image = torch.rand(4, 4, 3, generator=gen)
        try:
            for kwargs in ({}, {"image_cond": image},
                           {"image_cond": image, "text_cond": "x"}):
                remote = client.denoise(z_t, 0.5, **kwargs)
                local = toy.denoise(z_t, 0.5, **kwargs)
                assert torch.allclose(remote, local, atol=1e-6)
        finally:
            client.close()

    def test_requires_address(self, monkeypatch):
        monkeypatch.delenv("PORTRAITNERF_EDITOR_ADDR", raising=False)
        with pytest.raises(ValueError):
            ExternalDenoiser()

    def test_address_from_environment(self, service, monkeypatch):
        monkeypatch.setenv("PORTRAITNERF_EDITOR_ADDR", service)
        client = ExternalDenoiser()
        try:
            out = client.denoise(torch.zeros(2, 2, 3), 0.5,
                                 image_cond=torch.ones(2, 2, 3))
            ab = DEFAULT_SCHEDULE.alpha_bar(0.5)
            expected = (0.0 - math.sqrt(ab)) / math.sqrt(1 - ab)
            assert torch.allclose(out, torch.full((2, 2, 3), expected),
                                  atol=1e-6)
        finally:
            client.close()


def test_read_message_round_trip():
    a, b = socket.socketpair()
    try:
        msg = pack_request(3, VARIANT_UNCOND, 0.1, np.zeros((2,), np.float32))
        a.sendall(msg)
        assert read_message(b) == _strip_length(msg)
    finally:
        a.close()
        b.close()
