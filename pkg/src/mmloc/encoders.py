"""Toy backbones and transform heads.

Feature maps are torch tensors in channel-first layout, ``(d, h, w)`` for a
single map or ``(B, d, h, w)`` for a batch. Query vectors are ``(d,)`` or
``(B, d)``.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError, ShapeMismatchError


def init_uniform_fan_in(module, generator=None):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.Embedding, nn.EmbeddingBag)):
            with torch.no_grad():
                m.weight.normal_(0.0, 1.0, generator=generator)


class ConvBackbone(nn.Module):
    """Four 3x3 conv layers; the leading log2(stride) layers downsample by 2.

    With ``norm=True`` every hidden conv is followed by a per-sample group norm,
    which keeps batched and single-image outputs identical.
    """

    def __init__(self, in_channels, d=64, stride=8, widths=(16, 32), norm=False):
        super().__init__()
        n_down = int(round(math.log2(stride)))
        if 2 ** n_down != stride or not 1 <= n_down <= 4:
            raise ValueError(f"stride must be a power of two in [2, 16], got {stride}")
        self.stride = stride
        self.d = d
        chans = [in_channels, widths[0], widths[1], d, d]
        layers = []
        for i in range(4):
            s = 2 if i < n_down else 1
            layers.append(nn.Conv2d(chans[i], chans[i + 1], 3, stride=s, padding=1))
        self.convs = nn.ModuleList(layers)
        self.norms = nn.ModuleList(
            [nn.GroupNorm(math.gcd(8, c), c) for c in chans[1:4]] if norm else []
        )

    def forward(self, x):
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                if self.norms:
                    x = self.norms[i](x)
                x = F.relu(x)
        return x


def _check_divisible(x, stride, in_channels):
    if x.dim() not in (3, 4):
        raise ShapeMismatchError(f"expected (C,H,W) or (B,C,H,W), got {tuple(x.shape)}")
    c, h, w = x.shape[-3:]
    if c != in_channels:
        raise ShapeMismatchError(f"expected {in_channels} channels, got {c}")
    if h % stride or w % stride:
        raise ShapeMismatchError(f"input {h}x{w} is not divisible by stride {stride}")


def _run(net, x, in_channels):
    _check_divisible(x, net.stride, in_channels)
    single = x.dim() == 3
    out = net(x.unsqueeze(0) if single else x)
    return out[0] if single else out


def encode_image(net, image):
    """Image (3, H, W) or (B, 3, H, W) -> feature map of depth d at 1/stride."""
    return _run(net, image, 3)


def encode_sketch(net, sketch):
    """Sketch raster (1, S, S) or (B, 1, S, S) -> feature map."""
    return _run(net, sketch, 1)


class MLP(nn.Module):
    """Linear -> ReLU -> Linear acting on the last axis."""

    def __init__(self, d_in, d_out, hidden=None):
        super().__init__()
        hidden = hidden or d_out
        self.fc1 = nn.Linear(d_in, hidden)
        self.fc2 = nn.Linear(hidden, d_out)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class TextEncoder(nn.Module):
    """Mean of token embeddings followed by a one-hidden-layer MLP."""

    def __init__(self, vocab_size, d=64, hidden=None):
        super().__init__()
        self.vocab_size = vocab_size
        self.d = d
        self.embedding = nn.EmbeddingBag(vocab_size, d, mode="mean")
        self.mlp = MLP(d, d, hidden)

    def mean_embedding(self, token_lists):
        flat, offsets = [], []
        for tokens in token_lists:
            tokens = list(tokens)
            if not tokens:
                raise DataError("empty token list")
            for t in tokens:
                if not 0 <= int(t) < self.vocab_size:
                    raise DataError(f"token id {t} outside vocabulary of size {self.vocab_size}")
            offsets.append(len(flat))
            flat.extend(int(t) for t in tokens)
        device = self.embedding.weight.device
        return self.embedding(
            torch.tensor(flat, dtype=torch.long, device=device),
            torch.tensor(offsets, dtype=torch.long, device=device),
        )

    def forward(self, token_lists):
        return self.mlp(self.mean_embedding(token_lists))


def encode_text(net, tokens):
    """One token sequence -> (d,) vector; order of tokens does not matter."""
    return net([tokens])[0]


class PsiHead(nn.Module):
    """Per-location non-linear transform. Works on maps (B,d,h,w) and vectors (B,d)."""

    def __init__(self, d=64):
        super().__init__()
        self.d = d
        self.mlp = MLP(d, d)

    def forward(self, x):
        if x.dim() >= 3:
            return self.mlp(x.movedim(-3, -1)).movedim(-1, -3)
        return self.mlp(x)


def psi_transform(x, head):
    axis = -3 if x.dim() >= 3 else -1
    if x.shape[axis] != head.d:
        raise ShapeMismatchError(f"depth {x.shape[axis]} does not match head depth {head.d}")
    return head(x)


class ConvMeanPoolHead(nn.Module):
    """3x3 conv -> ReLU -> 1x1 conv -> spatial mean. Used for proposal and sketch vectors."""

    def __init__(self, d=64):
        super().__init__()
        self.d = d
        self.conv1 = nn.Conv2d(d, d, 3, padding=1)
        self.conv2 = nn.Conv2d(d, d, 1)

    def forward(self, x):
        x = self.conv2(F.relu(self.conv1(x)))
        return x.mean(dim=(-2, -1))


def proposal_head(head, roi, roi_size=7):
    """RoI patch (d, s, s) or (R, d, s, s) -> proposal vector(s)."""
    if roi.shape[-3:] != (head.d, roi_size, roi_size):
        raise ShapeMismatchError(
            f"expected RoI patch of shape {(head.d, roi_size, roi_size)}, got {tuple(roi.shape[-3:])}"
        )
    single = roi.dim() == 3
    out = head(roi.unsqueeze(0) if single else roi)
    return out[0] if single else out


def query_heads(sketch_head, text_head, sketch_fm, gloss_vec):
    """Final sketch and gloss vectors that form the scoring basis."""
    if sketch_fm.shape[-3] != sketch_head.d:
        raise ShapeMismatchError(f"sketch depth {sketch_fm.shape[-3]} != {sketch_head.d}")
    if gloss_vec.shape[-1] != text_head.fc2.out_features:
        raise ShapeMismatchError(f"gloss depth {gloss_vec.shape[-1]} != {text_head.fc2.out_features}")
    single = sketch_fm.dim() == 3
    s = sketch_head(sketch_fm.unsqueeze(0) if single else sketch_fm)
    t = text_head(gloss_vec)
    return (s[0], t) if single else (s, t)
