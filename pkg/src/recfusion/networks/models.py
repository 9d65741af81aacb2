import torch
import torch.nn as nn

from recfusion.networks.blocks import (
    AdaptiveFusion,
    Decoder,
    RestormerBlock,
    ShallowEncoder,
    conv1x1,
    conv3x3,
)
from recfusion.networks.params import NetConfig

# input stack of the proposal network: I_a, I_b, |gx_a|+|gy_a|, |gx_b|+|gy_b|
PROPOSAL_IN = 4


class FusionNet(nn.Module):
    """Two encoders -> adaptive fusion -> channel-attention blocks -> decoder.

    Returns raw decoder output: one channel (fused-image logit) or, for the
    decision-level variant, two channels of per-source weight logits.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        c = cfg.base_channels
        self.enc_a = ShallowEncoder(1, c)
        self.enc_b = ShallowEncoder(1, c)
        self.afm = AdaptiveFusion(
            c,
            cfg.attention_heads,
            interaction=cfg.ablation not in ("concat_afm", "no_interaction"),
            gating=cfg.ablation not in ("concat_afm", "no_gating"),
        )
        self.blocks = nn.Sequential(*[RestormerBlock(c, cfg.attention_heads) for _ in range(cfg.num_blocks)])
        self.decoder = Decoder(c, 2 if cfg.ablation == "decision_level" else 1)

    def forward(self, ia, ib):
        x = self.afm(self.enc_a(ia), self.enc_b(ib))
        return self.decoder(self.blocks(x))


class ReconstructionNet(nn.Module):
    """Shared trunk, then one decoder branch per source."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        c = cfg.base_channels
        self.trunk = nn.Sequential(conv3x3(1, c), nn.GELU(), conv3x3(c, c), nn.GELU())
        self.branch_a = nn.Sequential(conv3x3(c, c), nn.GELU(), conv3x3(c, 1))
        self.branch_b = nn.Sequential(conv3x3(c, c), nn.GELU(), conv3x3(c, 1))

    def forward(self, ifused):
        t = self.trunk(ifused)
        return self.branch_a(t), self.branch_b(t)


class ProposalNet(nn.Module):
    """Shared scorer applied to (a, b) and (b, a); swapping the sources swaps the maps.

    Input stack is (I_a, I_b, |grad I_a|, |grad I_b|). Output: four logit maps
    ordered (W_a, W_b, V_a, V_b), to be softmaxed pairwise.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        c = cfg.base_channels
        self.body = nn.Sequential(
            conv3x3(PROPOSAL_IN, c), nn.GELU(),
            conv3x3(c, c), nn.GELU(),
            conv3x3(c, c), nn.GELU(),
        )
        self.head = conv1x1(c, 2)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def score(self, own, other, own_mag, other_mag):
        return self.head(self.body(torch.cat([own, other, own_mag, other_mag], dim=1)))

    def forward(self, x):
        a, b, mag_a, mag_b = x.split(1, dim=1)
        sa = self.score(a, b, mag_a, mag_b)
        sb = self.score(b, a, mag_b, mag_a)
        return torch.cat([sa[:, 0:1], sb[:, 0:1], sa[:, 1:2], sb[:, 1:2]], dim=1)


ARCHITECTURES = {"F": FusionNet, "R": ReconstructionNet, "P": ProposalNet}


def build(role: str, cfg: NetConfig) -> nn.Module:
    cfg.validate_for(role)
    return ARCHITECTURES[role](cfg)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())

