"""
Encoders and decoders of the HOI motion tokenizer.

Three feature extractors map a window of frames to latents: one for hands
(shared between left and right, told apart by a handedness embedding), one
for object motion and a permutation-invariant point-cloud encoder for the
canonical object shape. The object decoder predicts object motion from the
object latent; the hand decoder is conditioned on that prediction.
"""

import logging
from typing import Tuple

import numpy as np

from . import tensor as T
from .layers import MLP, Embedding, Module
from .tensor import AutodiffError, Tensor

logger = logging.getLogger(__name__)

OBJECT_WIDTH = 10
HAND_WIDTH = 99
FRAME_WIDTH = OBJECT_WIDTH + 2 * HAND_WIDTH

LEFT = 0
RIGHT = 1


class WindowLengthMismatch(AutodiffError):
    """Window does not have exactly W frames"""
    pass


class EmptyCloud(AutodiffError):
    """Point cloud has no points"""
    pass


class PointEncoder(Module):
    """Shared per-point MLP followed by a channel-wise max over points."""

    def __init__(self, latent_dim: int, hidden: int, rng: np.random.Generator,
                 activation: str = 'tanh', dtype=np.float32):
        self.mlp = MLP([3, hidden, latent_dim], rng, activation, dtype)

    def __call__(self, cloud) -> Tensor:
        cloud = T.as_tensor(cloud)
        if cloud.ndim < 2 or cloud.shape[-2] == 0:
            raise EmptyCloud(f"Point cloud must have at least one point, got shape {cloud.shape}")
        if cloud.shape[-1] != 3:
            raise T.ShapeMismatch(f"Point cloud rows must be 3-vectors, got shape {cloud.shape}")
        return T.reduce_max(self.mlp(cloud), axis=-2)


class TokenizerNetwork(Module):
    """
    Window encoders and decoders for one tokenizer.

    Args:
        latent_dim: width d shared with the codebooks
        hidden: hidden width of every MLP
        window: frames per window W
        handedness_dim: width of the handedness embedding
        seed: initialisation seed
    """

    def __init__(self, latent_dim: int = 64, hidden: int = 128, window: int = 4,
                 handedness_dim: int = 8, seed: int = 0, activation: str = 'tanh',
                 dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.window = window
        self.handedness = Embedding(2, handedness_dim, rng, dtype=dtype)
        self.hand_encoder = MLP([window * HAND_WIDTH + handedness_dim, hidden, hidden, latent_dim],
                                rng, activation, dtype)
        self.object_encoder = MLP([window * OBJECT_WIDTH, hidden, hidden, latent_dim],
                                  rng, activation, dtype)
        self.point_encoder = PointEncoder(latent_dim, hidden, rng, activation, dtype)
        self.object_decoder = MLP([latent_dim, hidden, hidden, window * OBJECT_WIDTH],
                                  rng, activation, dtype)
        self.hand_decoder = MLP([latent_dim + window * OBJECT_WIDTH, hidden, hidden,
                                 window * FRAME_WIDTH], rng, activation, dtype)

    def _check_window(self, frames: Tensor, width: int, label: str) -> None:
        if frames.ndim != 3 or frames.shape[-1] != width:
            raise T.ShapeMismatch(f"{label} window must be (batch, W, {width}), got {frames.shape}")
        if frames.shape[1] != self.window:
            raise WindowLengthMismatch(
                f"{label} window has {frames.shape[1]} frames, expected {self.window}"
            )

    def encode_hand(self, frames, handedness) -> Tensor:
        """Latent (batch, d) for hand windows (batch, W, 99) with handedness flags (batch,)."""
        frames = T.as_tensor(frames)
        self._check_window(frames, HAND_WIDTH, 'Hand')
        batch = frames.shape[0]
        flags = np.broadcast_to(np.asarray(handedness, dtype=np.int64), (batch,))
        flat = T.reshape(frames, (batch, self.window * HAND_WIDTH))
        return self.hand_encoder(T.concat([flat, self.handedness(flags)], axis=-1))

    def encode_object(self, frames) -> Tensor:
        frames = T.as_tensor(frames)
        self._check_window(frames, OBJECT_WIDTH, 'Object')
        batch = frames.shape[0]
        return self.object_encoder(T.reshape(frames, (batch, self.window * OBJECT_WIDTH)))

    def encode_window(self, windows) -> Tuple[Tensor, Tensor, Tensor]:
        """
        Split (batch, W, 208) windows into entities and encode each.

        Returns:
            (z_o, z_l, z_r), each (batch, d)
        """
        windows = T.as_tensor(windows)
        self._check_window(windows, FRAME_WIDTH, 'Frame')
        obj = windows[:, :, :OBJECT_WIDTH]
        left = windows[:, :, OBJECT_WIDTH:OBJECT_WIDTH + HAND_WIDTH]
        right = windows[:, :, OBJECT_WIDTH + HAND_WIDTH:]
        z_o = self.encode_object(obj)
        z_l = self.encode_hand(left, LEFT)
        z_r = self.encode_hand(right, RIGHT)
        return z_o, z_l, z_r

    def point_features(self, cloud) -> Tensor:
        """c_o for a canonical cloud (N, 3) or a batch (B, N, 3)."""
        return self.point_encoder(cloud)

    def decode_object(self, zq_o, c_o) -> Tensor:
        """D_o(ẑ_o + c_o) as (batch, W, 10)."""
        out = self.object_decoder(T.add(zq_o, c_o))
        return T.reshape(out, (out.shape[0], self.window, OBJECT_WIDTH))

    def decode(self, zq_o, zq_l, zq_r, c_o) -> Tensor:
        """
        Reconstruct (batch, W, 208) windows from quantized latents.

        The object channels come from the object decoder; the hand decoder
        sees the summed latent plus c_o together with that object prediction.
        """
        zq_o, zq_l, zq_r = T.as_tensor(zq_o), T.as_tensor(zq_l), T.as_tensor(zq_r)
        for z in (zq_o, zq_l, zq_r):
            if z.shape[-1] != self.latent_dim:
                raise T.ShapeMismatch(f"Latent width {z.shape[-1]} != {self.latent_dim}")
        obj = self.decode_object(zq_o, c_o)
        batch = obj.shape[0]
        z_sum = T.add(T.add(T.add(zq_o, zq_l), zq_r), c_o)
        conditioning = T.reshape(obj, (batch, self.window * OBJECT_WIDTH))
        full = self.hand_decoder(T.concat([z_sum, conditioning], axis=-1))
        full = T.reshape(full, (batch, self.window, FRAME_WIDTH))
        return T.concat([obj, full[:, :, OBJECT_WIDTH:]], axis=-1)
