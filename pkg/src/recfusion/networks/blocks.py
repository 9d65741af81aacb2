"""Layers for the fusion, reconstruction and loss-proposal networks.

Everything here is smooth (GELU, sigmoid, softmax, average pooling, bilinear
upsampling) so that second derivatives through the networks are well defined.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F


def conv3x3(cin, cout):
    return nn.Conv2d(cin, cout, 3, padding=1)


def conv1x1(cin, cout):
    return nn.Conv2d(cin, cout, 1)


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel axis of an NCHW tensor."""

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = ((x - mu) ** 2).mean(1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class ChannelSelfAttention(nn.Module):
    """Transposed attention: a (C/h x C/h) attention map per head, cost linear in pixels."""

    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.qkv = conv1x1(dim, dim * 3)
        self.qkv_dw = nn.Conv2d(dim * 3, dim * 3, 3, padding=1, groups=dim * 3)
        self.proj = conv1x1(dim, dim)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv_dw(self.qkv(x)).chunk(3, dim=1)
        q = q.reshape(b, self.heads, c // self.heads, h * w)
        k = k.reshape(b, self.heads, c // self.heads, h * w)
        v = v.reshape(b, self.heads, c // self.heads, h * w)
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.temperature, dim=-1)
        out = (attn @ v).reshape(b, c, h, w)
        return self.proj(out)


class GatedFeedForward(nn.Module):
    def __init__(self, dim, expansion=2):
        super().__init__()
        hidden = dim * expansion
        self.project_in = conv1x1(dim, hidden * 2)
        self.dw = nn.Conv2d(hidden * 2, hidden * 2, 3, padding=1, groups=hidden * 2)
        self.project_out = conv1x1(hidden, dim)

    def forward(self, x):
        x1, x2 = self.dw(self.project_in(x)).chunk(2, dim=1)
        return self.project_out(F.gelu(x1) * x2)


class RestormerBlock(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.norm1 = LayerNorm2d(dim)
        self.attn = ChannelSelfAttention(dim, heads)
        self.norm2 = LayerNorm2d(dim)
        self.ffn = GatedFeedForward(dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class CrossAttention(nn.Module):
    """Spatial-token attention of one feature stream over another, at half resolution."""

    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.norm_q = LayerNorm2d(dim)
        self.norm_kv = LayerNorm2d(dim)
        self.q = conv1x1(dim, dim)
        self.kv = conv1x1(dim, dim * 2)
        self.proj = conv1x1(dim, dim)

    def forward(self, x, ctx):
        b, c, h, w = x.shape
        xs = F.avg_pool2d(self.norm_q(x), 2, ceil_mode=True)
        cs = F.avg_pool2d(self.norm_kv(ctx), 2, ceil_mode=True)
        hs, ws = xs.shape[-2:]
        d = c // self.heads
        q = self.q(xs).reshape(b, self.heads, d, hs * ws).transpose(-2, -1)
        k, v = self.kv(cs).chunk(2, dim=1)
        k = k.reshape(b, self.heads, d, hs * ws)
        v = v.reshape(b, self.heads, d, hs * ws).transpose(-2, -1)
        attn = torch.softmax(q @ k / d ** 0.5, dim=-1)
        out = (attn @ v).transpose(-2, -1).reshape(b, c, hs, ws)
        out = F.interpolate(self.proj(out), size=(h, w), mode="bilinear", align_corners=False)
        return out


class AdaptiveFusion(nn.Module):
    """Bidirectional cross-attention, concatenation, sigmoid gating, 1x1 merge.

    ``interaction=False`` drops the cross-attention and ``gating=False`` the gate;
    with both off this is plain concatenation followed by the merge.
    """

    def __init__(self, dim, heads, interaction=True, gating=True):
        super().__init__()
        self.interaction = interaction
        self.gating = gating
        if interaction:
            self.cross_ab = CrossAttention(dim, heads)
            self.cross_ba = CrossAttention(dim, heads)
        if gating:
            self.gate = conv1x1(dim * 2, dim * 2)
        self.merge = conv1x1(dim * 2, dim)

    def forward(self, fa, fb):
        if self.interaction:
            fa, fb = fa + self.cross_ab(fa, fb), fb + self.cross_ba(fb, fa)
        x = torch.cat([fa, fb], dim=1)
        if self.gating:
            x = x * torch.sigmoid(self.gate(x))
        return self.merge(x)


class ShallowEncoder(nn.Sequential):
    def __init__(self, cin, dim):
        super().__init__(conv3x3(cin, dim), nn.GELU(), conv3x3(dim, dim))


class Decoder(nn.Sequential):
    def __init__(self, dim, cout):
        hidden = max(dim // 2, 1)
        super().__init__(conv3x3(dim, hidden), nn.GELU(), conv3x3(hidden, cout))
