"""UNet variants for tumor segmentation.

Two encoders (a plain strided-conv pyramid and a ResNet34-style backbone)
share a decoder whose every block carries a 1x1 score head.  Three output
strategies: `plain` uses the last head's softmax, `ds` additionally trains
every head against downsampled targets (deep supervision), and `linear`
merges all upsampled score maps with trainable weights before the softmax.
Channel semantics everywhere: channel 0 = Tumor, channel 1 = Normal.
"""

from dataclasses import dataclass

import numpy as np

from . import nn

ENCODERS = ("baseline", "resnet34")
HEADS = ("plain", "ds", "linear")

# channel ladders at width 1.0, index = encoder block
_BASELINE_CHANNELS = (64, 128, 256, 512, 1024)
_RESNET_CHANNELS = (64, 64, 128, 256, 512)
_RESNET_STAGE_BLOCKS = (3, 4, 6, 3)


@dataclass(frozen=True)
class ModelConfig:
    encoder: str = "resnet34"
    head: str = "ds"
    depth: int = 5          # decoder block count k
    patch_size: int = 512   # network input P
    width: float = 1.0      # channel multiplier, paper scale = 1.0
    focal_gamma: float = 2.0

    def validate(self):
        if self.encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {self.encoder!r}, expected one of {ENCODERS}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}, expected one of {HEADS}")
        if not 2 <= self.depth <= 5:
            raise ValueError(f"depth must be in [2, 5], got {self.depth}")
        if self.patch_size % (1 << (self.depth + 1)) != 0:
            raise ValueError(
                f"patch_size {self.patch_size} must be divisible by 2^(depth+1) = "
                f"{1 << (self.depth + 1)}")
        if not 0 < self.width <= 1:
            raise ValueError(f"width must be in (0, 1], got {self.width}")
        return self

    def to_dict(self):
        return {
            "encoder": self.encoder, "head": self.head, "depth": self.depth,
            "patch_size": self.patch_size, "width": self.width,
            "focal_gamma": self.focal_gamma,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


@dataclass
class DecoderOutputs:
    """Per-block score maps (logits) and probability maps, smallest block
    first, plus the head-dependent final probability map."""
    head: str
    score_maps: list
    prob_maps: list
    final: object | None = None


def _width(c, width):
    return max(2, int(round(c * width)))


class _ConvBN:
    """Conv + batch norm + optional ReLU; all convs in the network except
    the 1x1 score heads go through this."""

    def __init__(self, store, prefix, cin, cout, k, stride, rng, relu=True):
        std = np.sqrt(2.0 / (cin * k * k))
        self.w = store.parameter(f"{prefix}.conv.w",
                                 rng.normal(0.0, std, (cout, cin, k, k)))
        self.gamma = store.parameter(f"{prefix}.bn.gamma", np.ones(cout))
        self.beta = store.parameter(f"{prefix}.bn.beta", np.zeros(cout))
        self.rmean = store.buffer(f"{prefix}.bn.running_mean", np.zeros(cout))
        self.rvar = store.buffer(f"{prefix}.bn.running_var", np.ones(cout))
        self.stride = stride
        self.relu = relu

    def __call__(self, x, training):
        x = nn.conv2d(x, self.w, stride=self.stride)
        x = nn.batch_norm(x, self.gamma, self.beta, self.rmean, self.rvar, training)
        return nn.relu(x) if self.relu else x


class _BasicBlock:
    """ResNet basic block; downsampling blocks use a 1x1 stride-2
    projection on the identity path."""

    def __init__(self, store, prefix, cin, cout, stride, rng):
        self.conv1 = _ConvBN(store, f"{prefix}.conv1", cin, cout, 3, stride, rng)
        self.conv2 = _ConvBN(store, f"{prefix}.conv2", cout, cout, 3, 1, rng, relu=False)
        if stride != 1 or cin != cout:
            self.proj = _ConvBN(store, f"{prefix}.proj", cin, cout, 1, stride, rng,
                                relu=False)
        else:
            self.proj = None

    def __call__(self, x, training):
        identity = self.proj(x, training) if self.proj is not None else x
        out = self.conv2(self.conv1(x, training), training)
        return nn.relu(nn.add(out, identity))


class _BaselineEncoder:
    """Stem (7x7 stride 2) then depth-1 blocks of two 3x3 convs, the first
    with stride 2 and doubled channels."""

    def __init__(self, store, cfg, rng):
        ch = [_width(c, cfg.width) for c in _BASELINE_CHANNELS[:cfg.depth]]
        self.channels = ch
        self.stem = _ConvBN(store, "enc.stem", 3, ch[0], 7, 2, rng)
        self.blocks = []
        for i in range(1, cfg.depth):
            self.blocks.append((
                _ConvBN(store, f"enc.b{i}.conv1", ch[i - 1], ch[i], 3, 2, rng),
                _ConvBN(store, f"enc.b{i}.conv2", ch[i], ch[i], 3, 1, rng),
            ))

    def __call__(self, x, training):
        feats = [self.stem(x, training)]
        for conv1, conv2 in self.blocks:
            feats.append(conv2(conv1(feats[-1], training), training))
        return feats


class _ResNetEncoder:
    """ResNet34 convolutional backbone: stem, 3x3 max pool, then basic-block
    stages of [3, 4, 6, 3] blocks (truncated to depth-1 stages)."""

    def __init__(self, store, cfg, rng):
        ch = [_width(c, cfg.width) for c in _RESNET_CHANNELS[:cfg.depth]]
        self.channels = ch
        self.stem = _ConvBN(store, "enc.stem", 3, ch[0], 7, 2, rng)
        self.stages = []
        for s in range(1, cfg.depth):
            blocks = []
            for b in range(_RESNET_STAGE_BLOCKS[s - 1]):
                stride = 2 if (b == 0 and s > 1) else 1
                cin = ch[s - 1] if b == 0 else ch[s]
                blocks.append(_BasicBlock(store, f"enc.s{s}.b{b}", cin, ch[s],
                                          stride, rng))
            self.stages.append(blocks)

    def __call__(self, x, training):
        feats = [self.stem(x, training)]
        h = nn.max_pool3x3(feats[-1])
        for blocks in self.stages:
            for block in blocks:
                h = block(h, training)
            feats.append(h)
        return feats


class _DecoderBlock:
    """Bilinear x2 upsample, optional skip concat, two 3x3 convs with the
    same filter count, and a 1x1 score head."""

    def __init__(self, store, prefix, cin_up, cskip, cout, rng):
        cin = cin_up + cskip
        self.conv1 = _ConvBN(store, f"{prefix}.conv1", cin, cout, 3, 1, rng)
        self.conv2 = _ConvBN(store, f"{prefix}.conv2", cout, cout, 3, 1, rng)
        std = np.sqrt(2.0 / cout)
        self.head_w = store.parameter(f"{prefix}.head.w",
                                      rng.normal(0.0, std, (2, cout, 1, 1)))

    def __call__(self, x, skip, training):
        h, w = x.data.shape[2], x.data.shape[3]
        x = nn.bilinear_upsample(x, (2 * h, 2 * w))
        if skip is not None:
            x = nn.concat_channels(x, skip)
        x = self.conv2(self.conv1(x, training), training)
        score = nn.conv2d(x, self.head_w, stride=1)
        return x, score


class SegModel:
    def __init__(self, cfg, seed=0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.store = nn.ParamStore(dtype)
        rng = np.random.default_rng(seed)
        if cfg.encoder == "baseline":
            self.encoder = _BaselineEncoder(self.store, cfg, rng)
        else:
            self.encoder = _ResNetEncoder(self.store, cfg, rng)
        enc_ch = self.encoder.channels
        k = cfg.depth
        self.decoder = []
        up_ch = enc_ch[-1]
        for level in range(k):
            skip_ch = enc_ch[k - 2 - level] if level <= k - 2 else 0
            out_ch = max(2, enc_ch[-1] >> (level + 1))
            self.decoder.append(_DecoderBlock(
                self.store, f"dec.b{level}", up_ch, skip_ch, out_ch, rng))
            up_ch = out_ch
        if cfg.head == "linear":
            self.merge_w = self.store.parameter("merge.w", np.full(k, 1.0 / k))
        else:
            self.merge_w = None

    def forward(self, batch, training=False, truncate_at=None):
        """Run the network on an NCHW float batch.

        truncate_at=L evaluates decoder blocks 0..L only and returns
        outputs with final=None (fast-inference path).
        """
        x = batch if isinstance(batch, nn.Tensor) else nn.Tensor(
            np.ascontiguousarray(batch, dtype=self.store.dtype))
        p = self.cfg.patch_size
        if x.data.ndim != 4 or x.data.shape[1] != 3 or x.data.shape[2:] != (p, p):
            raise ValueError(
                f"expected input of shape (N, 3, {p}, {p}), got {x.data.shape}")
        feats = self.encoder(x, training)
        k = self.cfg.depth
        h = feats[-1]
        scores, probs = [], []
        for level, block in enumerate(self.decoder):
            skip = feats[k - 2 - level] if level <= k - 2 else None
            h, score = block(h, skip, training)
            scores.append(score)
            probs.append(nn.softmax_channels(score))
            if truncate_at is not None and level == truncate_at:
                return DecoderOutputs(self.cfg.head, scores, probs, final=None)
        if self.cfg.head == "linear":
            final = linear_merge(scores, self.merge_w, (p, p))
        else:
            final = probs[-1]
        return DecoderOutputs(self.cfg.head, scores, probs, final=final)

    def loss(self, outputs, target):
        """Training loss for a batch: deep supervision sums focal terms over
        every block; the other heads apply focal loss to the final map."""
        if self.cfg.head == "ds":
            return deep_supervision_loss(outputs, target, self.cfg.focal_gamma)
        return focal_loss(outputs.final, target, self.cfg.focal_gamma)

    def parameter_names(self):
        return set(self.store.params)


def build_model(cfg, seed=0, dtype=np.float32):
    return SegModel(cfg, seed=seed, dtype=dtype)


def save_model(model, path):
    return nn.save_checkpoint(path, model.store, model_config=model.cfg.to_dict())


def load_model(path, dtype=np.float32):
    manifest, tensors = nn.load_checkpoint(path)
    cfg = ModelConfig.from_dict(manifest["model_config"])
    model = SegModel(cfg, seed=0, dtype=dtype)
    nn.restore_into(model.store, manifest, tensors)
    return model


def focal_loss(probs, target, gamma):
    """Mean over pixels of -(1 - p_t)^gamma * log(p_t), p_t the predicted
    probability of the true class.  Probabilities are clamped to
    [1e-7, 1 - 1e-7] before the log."""
    t = probs if isinstance(probs, nn.Tensor) else nn.Tensor(probs)
    target = np.asarray(target, dtype=t.dtype)
    if target.shape != t.data.shape:
        raise ValueError(f"probs {t.data.shape} and target {target.shape} differ")
    pt = nn.sum_channels(nn.mul(t, target))
    pt = nn.clamp(pt, 1e-7, 1.0 - 1e-7)
    weight = nn.pow_const(nn.add(nn.neg(pt), 1.0), gamma)
    return nn.mean_all(nn.mul(weight, nn.neg(nn.log(pt))))


def downsample_target(target, factor):
    """Majority-vote block pooling of a one-hot (N, 2, H, W) target; ties go
    to Tumor (channel 0)."""
    if factor == 1:
        return target
    n, c, h, w = target.shape
    tumor = target[:, 0].reshape(n, h // factor, factor, w // factor, factor)
    votes = tumor.sum(axis=(2, 4))
    is_tumor = 2 * votes >= factor * factor
    out = np.empty((n, 2, h // factor, w // factor), dtype=target.dtype)
    out[:, 0] = is_tumor
    out[:, 1] = ~is_tumor
    return out


def deep_supervision_loss(outputs, target, gamma):
    """Sum of focal losses of every block's probability map against the
    matching majority-vote downsample of the target (equal weights)."""
    if outputs.head != "ds":
        raise ValueError(f"deep supervision loss needs a ds-head model, got {outputs.head!r}")
    p = target.shape[-1]
    total = None
    for prob in outputs.prob_maps:
        factor = p // prob.data.shape[-1]
        term = focal_loss(prob, downsample_target(target, factor), gamma)
        total = term if total is None else nn.add(total, term)
    return total


def linear_merge(score_maps, weights, out_hw):
    """Softmax of the weighted sum of bilinearly upsampled score maps;
    gradients flow into the weights and every score map."""
    if len(score_maps) != weights.data.shape[0]:
        raise ValueError(
            f"{len(score_maps)} score maps but {weights.data.shape[0]} merge weights")
    acc = None
    for level, score in enumerate(score_maps):
        term = nn.mul(nn.bilinear_upsample(score, out_hw),
                      nn.index_scalar(weights, level))
        acc = term if acc is None else nn.add(acc, term)
    return nn.softmax_channels(acc)
