"""Parameter / MAC accounting, shape tracing and the closed-form GPM vs WMHSA estimates."""

from __future__ import annotations

from dataclasses import dataclass, field

from .backbone import REPORTED_COMPLEXITY, HGpeModel, preset
from .blocks import GPEBlock
from .nn import Recorder, Row

CONVENTIONS = ("macs", "2x_macs")


def gpm_closed_form(C: int, K: int, H: int, W: int, w: int = 0, d: int = 0) -> tuple[float, float]:
    """Approximate GPM (params, flops) from the published expressions, with L = H*W.

    ``w`` is accepted for symmetry with the window configuration; the
    expressions do not use it.
    """
    L = H * W
    params = 2 * C * C + C * (3 * K * K + 4 * K) + K
    flops = C * C * (2 + 1.5 * L) + C * (K * K * L + 6 * K * K * L + 16 * K * H + 4.5 * L) + K * d
    return params, flops


def wmhsa_closed_form(C: int, L: int, l: int) -> tuple[int, int]:
    """Window multi-head self-attention: 4(C+1)C params, 8C^2 L + 4CLl + 3Ll flops."""
    return 4 * (C + 1) * C, 8 * C * C * L + 4 * C * L * l + 3 * L * l


@dataclass
class StageEstimate:
    stage: int
    channels: int
    height: int
    width: int
    window: int
    head_dim: int
    gpm_params: int            # counted
    gpm_macs: int              # counted
    closed_params: float
    closed_flops: float
    wmhsa_params: int
    wmhsa_flops: int

    @property
    def ratio(self) -> float:
        """Counted GPM MACs over the closed-form flops estimate."""
        return self.gpm_macs / self.closed_flops


@dataclass
class ComplexityReport:
    rows: list[Row]
    input_size: tuple[int, int]
    head_rows: int = 0         # trailing rows that belong to the classifier head
    stages: list[StageEstimate] = field(default_factory=list)
    flop_convention: str = "macs"
    variant: str = "custom"

    @property
    def backbone_rows(self) -> list[Row]:
        return self.rows[:len(self.rows) - self.head_rows]

    @property
    def backbone_params(self) -> int:
        return sum(r.params for r in self.backbone_rows)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    def macs(self, include_head: bool = False) -> int:
        rows = self.rows if include_head else self.backbone_rows
        return sum(r.macs for r in rows)

    def flops(self, convention: str | None = None, include_head: bool = False) -> int:
        convention = convention or self.flop_convention
        if convention not in CONVENTIONS:
            raise ValueError(f"unknown flop convention {convention!r}; choose from {CONVENTIONS}")
        rows = self.rows if include_head else self.backbone_rows
        if convention == "macs":
            return sum(r.macs for r in rows)
        return sum(2 * r.macs + r.elementwise for r in rows)

    def render(self) -> str:
        width = max([len(r.path) for r in self.rows] + [10])
        lines = [f"{'layer':<{width}}  {'kind':<10} {'params':>10} {'MACs':>14}  out shape"]
        for r in self.rows:
            lines.append(f"{r.path:<{width}}  {r.kind:<10} {r.params:>10d} {r.macs:>14d}  "
                         f"{'x'.join(map(str, r.out_shape))}")
        h, w = self.input_size
        lines += [
            "",
            f"input {h}x{w}, variant {self.variant}",
            f"params   backbone {self.backbone_params:,d} ({self.backbone_params / 1e6:.3f} M)   "
            f"with head {self.total_params:,d} ({self.total_params / 1e6:.3f} M)",
        ]
        for conv in CONVENTIONS:
            lines.append(f"flops[{conv:<7}] backbone {self.flops(conv) / 1e9:.4f} G   "
                         f"with head {self.flops(conv, True) / 1e9:.4f} G")
        if self.stages:
            lines += ["", "stage  C    HxW      w   GPM params  closed   GPM MACs     closed flops  "
                          "ratio  WMHSA params  WMHSA flops"]
            for s in self.stages:
                lines.append(
                    f"{s.stage:<5}  {s.channels:<4} {s.height}x{s.width:<5} {s.window:<3} "
                    f"{s.gpm_params:>10d}  {s.closed_params:>7.0f}  {s.gpm_macs:>11d}  "
                    f"{s.closed_flops:>12.0f}  {s.ratio:>5.2f}  {s.wmhsa_params:>12d}  "
                    f"{s.wmhsa_flops:>11d}")
        return "\n".join(lines)

    def records(self) -> str:
        """One layer per line: path params macs."""
        return "".join(f"{r.path} {r.params} {r.macs}\n" for r in self.rows)


def _stage_estimates(model: HGpeModel, input_size) -> list[StageEstimate]:
    cfg = model.cfg
    out = []
    shapes = dict((path, o) for path, _, o in shape_trace(model, input_size).entries)
    for i in (2, 3, 4):
        stage = model.stages[i - 1]
        gpe = next((m for _, m in stage.children() if isinstance(m, GPEBlock)), None)
        if gpe is None:
            continue
        _, c, h, w = shapes[stage.down.path]
        rec = Recorder()
        gpe.gpm.trace((1, c, h, w), rec)
        lsae = getattr(gpe.gpm, "lsae", None)
        d = lsae.head_dim if lsae is not None else c // 2
        win = cfg.window_sizes[i - 1]
        cp, cf = gpm_closed_form(c, cfg.gig_kernel, h, w, win, d)
        wp, wf = wmhsa_closed_form(c, h * w, win * win)
        out.append(StageEstimate(i, c, h, w, win, d, sum(r.params for r in rec.rows),
                                 sum(r.macs for r in rec.rows), cp, cf, wp, wf))
    return out


def complexity_report(model: HGpeModel, input_size=None, batch: int = 1) -> ComplexityReport:
    """Trace ``model`` at ``input_size`` (defaults to the config's) into per-layer rows."""
    h, w = input_size or model.cfg.input_size
    rec = Recorder()
    shape = model.trace((batch, 3, h, w), rec, include_head=False)
    n_backbone = len(rec.rows)
    model.head.trace((shape[0], shape[1]), rec)
    report = ComplexityReport(rec.rows, (h, w), len(rec.rows) - n_backbone,
                              variant=model.cfg.variant)
    report.stages = _stage_estimates(model, (h, w))
    return report


def count_params(model: HGpeModel, include_head: bool = True) -> int:
    report = complexity_report(model)
    return report.total_params if include_head else report.backbone_params


def count_macs(model: HGpeModel, input_size=None, include_head: bool = False) -> int:
    return complexity_report(model, input_size).macs(include_head)


@dataclass
class ShapeTrace:
    entries: list[tuple[str, tuple[int, ...], tuple[int, ...]]]

    def validate(self) -> "ShapeTrace":
        for (p0, _, out), (p1, inp, _) in zip(self.entries, self.entries[1:]):
            if tuple(out) != tuple(inp):
                raise ValueError(f"shape chain broken between {p0} (out {out}) and {p1} (in {inp})")
        return self

    def render(self) -> str:
        width = max(len(p) for p, _, _ in self.entries)
        return "\n".join(f"{p:<{width}}  {'x'.join(map(str, i))} -> {'x'.join(map(str, o))}"
                         for p, i, o in self.entries)


def shape_trace(model: HGpeModel, input_size=None, batch: int = 1) -> ShapeTrace:
    h, w = input_size or model.cfg.input_size
    shape = (batch, 3, h, w)
    entries = []
    for path, unit in model.top_level():
        out = tuple(unit.trace(shape, Recorder()))
        entries.append((path, shape, out))
        shape = out
    pooled = (shape[0], shape[1])
    entries.append(("pool", shape, pooled))
    entries.append((model.head.path, pooled, (shape[0], model.cfg.num_classes)))
    return ShapeTrace(entries).validate()


@dataclass
class ReferenceRow:
    variant: str
    params: int
    flops: dict[str, int]
    reference: tuple[float, float]

    @property
    def params_m(self) -> float:
        return self.params / 1e6

    @property
    def convention(self) -> str:
        """The flop convention that lands closer to the reference."""
        ref = self.reference[1] * 1e9
        return min(CONVENTIONS, key=lambda c: abs(self.flops[c] - ref))

    @property
    def flops_g(self) -> float:
        return self.flops[self.convention] / 1e9

    @property
    def params_deviation(self) -> float:
        return self.params_m / self.reference[0] - 1

    @property
    def flops_deviation(self) -> float:
        return self.flops_g / self.reference[1] - 1


def reference_comparison(variant: str, input_size=(224, 224)) -> ReferenceRow:
    cfg = preset(variant)
    report = complexity_report(HGpeModel(cfg), input_size)
    return ReferenceRow(cfg.variant, report.backbone_params,
                     {c: report.flops(c) for c in CONVENTIONS}, REPORTED_COMPLEXITY[cfg.variant])
