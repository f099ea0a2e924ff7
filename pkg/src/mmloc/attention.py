"""Cross-modal attention for query-guided proposal generation.

The fused query is scored against every location of the transformed image
map; the raw scores reweight the untransformed map, which is then stacked
with the original along depth and projected back to depth ``d``.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import PsiHead
from .errors import ShapeMismatchError

DEFAULT_K = 256.0


def global_max_pool(fm):
    """Per-channel max over all locations: (..., d, h, w) -> (..., d)."""
    if fm.dim() < 3 or fm.shape[-1] == 0 or fm.shape[-2] == 0:
        raise ShapeMismatchError(f"expected a non-empty feature map, got {tuple(fm.shape)}")
    return fm.amax(dim=(-2, -1))


def fuse_query(sketch_global, text_vec, W):
    """``W @ [sketch; text]`` with ``W`` of shape (d, 2d); batched over leading axes."""
    if sketch_global.shape[-1] != text_vec.shape[-1]:
        raise ShapeMismatchError(
            f"sketch length {sketch_global.shape[-1]} != text length {text_vec.shape[-1]}"
        )
    if W.shape[-1] != 2 * sketch_global.shape[-1]:
        raise ShapeMismatchError(f"W has shape {tuple(W.shape)}, expected (d, {2 * sketch_global.shape[-1]})")
    return torch.cat([sketch_global, text_vec], dim=-1) @ W.transpose(-1, -2)


def compatibility_map(image_fm_psi, q, K=DEFAULT_K):
    """scores[..., m, n] = <L_mn, q> / K, no normalisation."""
    if K <= 0:
        raise ValueError(f"K must be positive, got {K}")
    if image_fm_psi.shape[-3] != q.shape[-1]:
        raise ShapeMismatchError(f"map depth {image_fm_psi.shape[-3]} != query length {q.shape[-1]}")
    return torch.einsum("...dhw,...d->...hw", image_fm_psi, q) / K


def apply_attention(image_fm, att):
    """Scale each local depth-d vector by its scalar attention weight."""
    if image_fm.shape[-2:] != att.shape[-2:]:
        raise ShapeMismatchError(f"map {tuple(image_fm.shape)} vs attention {tuple(att.shape)}")
    return image_fm * att.unsqueeze(-3)


def augment_features(original, attended, proj, bias=None):
    """Depth-concat ``[attended; original]`` then a per-location linear map (d, 2d)."""
    if original.shape != attended.shape:
        raise ShapeMismatchError(f"original {tuple(original.shape)} vs attended {tuple(attended.shape)}")
    stacked = torch.cat([attended, original], dim=-3)
    out = torch.einsum("ec,...chw->...ehw", proj, stacked)
    if bias is not None:
        out = out + bias[:, None, None]
    return out


class CrossModalAttention(nn.Module):
    """Holds psi_I, psi_S, psi_T, the query fusion W and the re-projection.

    Missing modalities enter the fusion as zero vectors. With ``bypass=True``
    the augmented map is the original map unchanged.
    """

    def __init__(self, d=64, K=DEFAULT_K):
        super().__init__()
        self.d = d
        self.K = float(K)
        self.psi_image = PsiHead(d)
        self.psi_sketch = PsiHead(d)
        self.psi_text = PsiHead(d)
        self.W = nn.Parameter(torch.empty(d, 2 * d))
        self.proj = nn.Parameter(torch.empty(d, 2 * d))
        self.proj_bias = nn.Parameter(torch.zeros(d))

    def reset_projection(self, generator=None, scale=0.01):
        # start from the pass-through map so enabling attention does not wipe
        # what the RPN learned on raw features
        with torch.no_grad():
            self.proj.zero_()
            self.proj[:, : self.d].uniform_(-scale, scale, generator=generator)
            self.proj[:, self.d:] = torch.eye(self.d, dtype=self.proj.dtype)
            self.proj_bias.zero_()

    def query_vector(self, sketch_fm=None, text_vec=None, batch=None, dtype=None):
        parts = []
        if sketch_fm is not None:
            s = global_max_pool(self.psi_sketch(sketch_fm))
            batch, dtype = s.shape[0], s.dtype
        if text_vec is not None:
            t = self.psi_text(text_vec)
            batch, dtype = t.shape[0], t.dtype
        if sketch_fm is None and text_vec is None:
            raise ValueError("at least one query modality is required")
        zeros = torch.zeros(batch, self.d, dtype=dtype, device=self.W.device)
        s = s if sketch_fm is not None else zeros
        t = t if text_vec is not None else zeros
        return fuse_query(s, t, self.W)

    def attention_map(self, image_fm, q):
        return compatibility_map(self.psi_image(image_fm), q, self.K)

    def augment(self, image_fm, att):
        attended = apply_attention(image_fm, att)
        return augment_features(image_fm, attended, self.proj, self.proj_bias)

    def forward(self, image_fm, sketch_fm=None, text_vec=None, bypass=False):
        if bypass:
            return image_fm, None
        q = self.query_vector(sketch_fm, text_vec)
        att = self.attention_map(image_fm, q)
        return self.augment(image_fm, att), att
