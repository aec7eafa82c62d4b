//! Declarative U-Net layouts and the pruning transform.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    CrossAttnDown,
    Down,
    MidCrossAttn,
    CrossAttnUp,
    Up,
}

impl BlockKind {
    pub fn has_attention(self) -> bool {
        matches!(
            self,
            BlockKind::CrossAttnDown | BlockKind::MidCrossAttn | BlockKind::CrossAttnUp
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Full,
    Toy,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Full => "full",
            Scale::Toy => "toy",
        })
    }
}

/// Where a pruned block's weights come from in its source layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockOrigin {
    /// Index of the source block in the same path (down or up).
    pub block: usize,
    /// Source pair index for each surviving pair.
    pub pairs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub kind: BlockKind,
    /// R-T pairs for cross-attention kinds; plain residual blocks otherwise.
    pub rt_pairs: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default)]
    pub has_downsample: bool,
    #[serde(default)]
    pub has_upsample: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<BlockOrigin>,
}

impl BlockSpec {
    fn new(kind: BlockKind, rt_pairs: usize, in_channels: usize, out_channels: usize) -> Self {
        BlockSpec {
            kind,
            rt_pairs,
            in_channels,
            out_channels,
            has_downsample: false,
            has_upsample: false,
            origin: None,
        }
    }

    /// Source block and source pair for pair `k` (identity when unpruned).
    pub fn source_of_pair(&self, own_index: usize, k: usize) -> (usize, usize) {
        match &self.origin {
            Some(o) => (o.block, o.pairs[k]),
            None => (own_index, k),
        }
    }

    pub fn source_block(&self, own_index: usize) -> usize {
        self.origin.as_ref().map_or(own_index, |o| o.block)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetSpec {
    pub scale: Scale,
    pub in_channels: usize,
    pub out_channels: usize,
    pub channel_schedule: Vec<usize>,
    pub context_dim: usize,
    pub num_heads: usize,
    pub norm_groups: usize,
    pub down_blocks: Vec<BlockSpec>,
    pub mid_block: BlockSpec,
    pub up_blocks: Vec<BlockSpec>,
}

/// Which R-T pair to remove from a cross-attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropPosition {
    First,
    Middle,
    Last,
}

impl DropPosition {
    pub const ALL: [DropPosition; 3] = [DropPosition::First, DropPosition::Middle, DropPosition::Last];

    pub fn index(self, pairs: usize) -> usize {
        match self {
            DropPosition::First => 0,
            DropPosition::Middle => pairs / 2,
            DropPosition::Last => pairs - 1,
        }
    }
}

/// Pair-drop positions used by [`student_spec_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneOptions {
    pub down_drop: DropPosition,
    pub up_drop: DropPosition,
}

impl Default for PruneOptions {
    /// The down path keeps its first pair (it performs the channel change).
    /// In the up path only the middle pair can go: the first pair of every up
    /// block reads the widest skip and the last one reads the downsampler
    /// skip, and both of those skips survive pruning.
    fn default() -> Self {
        PruneOptions {
            down_drop: DropPosition::Last,
            up_drop: DropPosition::Middle,
        }
    }
}

/// Reference layout. `Full` uses the 320/640/1280/1280 widths with a 768-wide
/// context and 8 heads; `Toy` shares the topology at 32/64/128/128, 64, 2.
pub fn original_spec(scale: Scale) -> UNetSpec {
    let (ch, context_dim, num_heads, norm_groups) = match scale {
        Scale::Full => ([320, 640, 1280, 1280], 768, 8, 32),
        Scale::Toy => ([32, 64, 128, 128], 64, 2, 8),
    };
    let mut down_blocks = Vec::new();
    let mut prev = ch[0];
    for (i, &c) in ch.iter().enumerate() {
        let kind = if i < 3 { BlockKind::CrossAttnDown } else { BlockKind::Down };
        let mut b = BlockSpec::new(kind, 2, prev, c);
        b.has_downsample = i < 3;
        down_blocks.push(b);
        prev = c;
    }
    let mid_block = BlockSpec::new(BlockKind::MidCrossAttn, 1, ch[3], ch[3]);
    let mut up_blocks = Vec::new();
    let mut prev = ch[3];
    for (j, &c) in ch.iter().rev().enumerate() {
        let kind = if j == 0 { BlockKind::Up } else { BlockKind::CrossAttnUp };
        let mut b = BlockSpec::new(kind, 3, prev, c);
        b.has_upsample = j < 3;
        up_blocks.push(b);
        prev = c;
    }
    UNetSpec {
        scale,
        in_channels: 4,
        out_channels: 4,
        channel_schedule: ch.to_vec(),
        context_dim,
        num_heads,
        norm_groups,
        down_blocks,
        mid_block,
        up_blocks,
    }
}

/// [`student_spec_with`] using the default drop positions.
pub fn student_spec(orig: &UNetSpec) -> Result<UNetSpec> {
    student_spec_with(orig, PruneOptions::default())
}

/// Removes one R-T pair from every cross-attention down/up block and deletes
/// the plain down/up blocks. After deletion the deepest remaining down block
/// feeds the mid block without downsampling, and the up path starts at the
/// mid block's resolution.
pub fn student_spec_with(orig: &UNetSpec, opts: PruneOptions) -> Result<UNetSpec> {
    orig.validate()?;
    let prune = |path: &[BlockSpec], drop: DropPosition| -> Result<Vec<BlockSpec>> {
        let mut out = Vec::new();
        for (i, b) in path.iter().enumerate() {
            match b.kind {
                BlockKind::Down | BlockKind::Up => continue,
                _ => {}
            }
            if b.rt_pairs < 2 {
                return Err(Error::Pruning(format!(
                    "block {i} ({:?}) has {} R-T pair(s); cannot remove the last one",
                    b.kind, b.rt_pairs
                )));
            }
            let dropped = drop.index(b.rt_pairs);
            let kept: Vec<usize> = (0..b.rt_pairs)
                .filter(|&k| k != dropped)
                .map(|k| b.source_of_pair(i, k).1)
                .collect();
            let mut nb = b.clone();
            nb.rt_pairs -= 1;
            nb.origin = Some(BlockOrigin {
                block: b.source_block(i),
                pairs: kept,
            });
            out.push(nb);
        }
        Ok(out)
    };
    let mut down_blocks = prune(&orig.down_blocks, opts.down_drop)?;
    let mut up_blocks = prune(&orig.up_blocks, opts.up_drop)?;
    if down_blocks.is_empty() || up_blocks.is_empty() {
        return Err(Error::Pruning("no cross-attention blocks to keep".into()));
    }
    if let Some(last) = down_blocks.last_mut() {
        last.has_downsample = false;
    }
    if let Some(last) = up_blocks.last_mut() {
        last.has_upsample = false;
    }
    let schedule: Vec<usize> = down_blocks.iter().map(|b| b.out_channels).collect();
    let deepest = *schedule.last().unwrap();
    let mut mid_block = orig.mid_block.clone();
    mid_block.in_channels = deepest;
    mid_block.out_channels = deepest;
    let mut prev = deepest;
    for b in &mut up_blocks {
        b.in_channels = prev;
        prev = b.out_channels;
    }
    let spec = UNetSpec {
        channel_schedule: schedule,
        down_blocks,
        mid_block,
        up_blocks,
        ..orig.clone()
    };
    spec.validate()?;
    Ok(spec)
}

impl UNetSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: UNetSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn time_embed_dim(&self) -> usize {
        4 * self.channel_schedule[0]
    }

    pub fn num_cross_attention_layers(&self) -> usize {
        let path = |bs: &[BlockSpec]| -> usize {
            bs.iter().filter(|b| b.kind.has_attention()).map(|b| b.rt_pairs).sum()
        };
        path(&self.down_blocks) + path(&self.up_blocks) + 1
    }

    /// Number of 2x downsamplings between the input and the mid block.
    pub fn depth(&self) -> usize {
        self.down_blocks.iter().filter(|b| b.has_downsample).count()
    }

    /// Checks channel chaining, block kinds, and that the up path consumes
    /// exactly the skip tensors the down path emits, at matching resolutions.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        let levels = self.channel_schedule.len();
        if levels == 0 || self.channel_schedule.contains(&0) {
            return bad("channel schedule must be non-empty and positive".into());
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("in/out channels must be positive".into());
        }
        if self.context_dim == 0 || self.num_heads == 0 || self.norm_groups == 0 {
            return bad("context_dim, num_heads and norm_groups must be positive".into());
        }
        if self.down_blocks.len() != levels || self.up_blocks.len() != levels {
            return bad(format!(
                "{} down and {} up blocks for a {levels}-level schedule",
                self.down_blocks.len(),
                self.up_blocks.len()
            ));
        }
        let check_block = |where_: &str, b: &BlockSpec| -> Result<()> {
            if b.rt_pairs == 0 {
                return bad(format!("{where_}: rt_pairs must be at least 1"));
            }
            if b.in_channels == 0 || b.out_channels == 0 {
                return bad(format!("{where_}: channels must be positive"));
            }
            for c in [b.in_channels, b.out_channels] {
                if c % self.norm_groups != 0 {
                    return bad(format!("{where_}: {c} channels not divisible by {} groups", self.norm_groups));
                }
            }
            if b.kind.has_attention() && b.out_channels % self.num_heads != 0 {
                return bad(format!(
                    "{where_}: {} channels not divisible by {} heads",
                    b.out_channels, self.num_heads
                ));
            }
            if let Some(o) = &b.origin {
                if o.pairs.len() != b.rt_pairs {
                    return bad(format!("{where_}: origin maps {} pairs, block has {}", o.pairs.len(), b.rt_pairs));
                }
            }
            Ok(())
        };
        let mut prev = self.channel_schedule[0];
        for (i, b) in self.down_blocks.iter().enumerate() {
            let w = format!("down block {i}");
            check_block(&w, b)?;
            if !matches!(b.kind, BlockKind::CrossAttnDown | BlockKind::Down) {
                return bad(format!("{w}: kind {:?} not allowed in the down path", b.kind));
            }
            if b.has_upsample {
                return bad(format!("{w}: down blocks cannot upsample"));
            }
            if b.in_channels != prev {
                return bad(format!("{w}: expects {} input channels, previous stage emits {prev}", b.in_channels));
            }
            if b.out_channels != self.channel_schedule[i] {
                return bad(format!("{w}: emits {} channels, schedule says {}", b.out_channels, self.channel_schedule[i]));
            }
            prev = b.out_channels;
        }
        let m = &self.mid_block;
        check_block("mid block", m)?;
        if m.kind != BlockKind::MidCrossAttn || m.rt_pairs != 1 {
            return bad("mid block must be a single R-T-R cross-attention block".into());
        }
        if m.has_downsample || m.has_upsample || m.origin.is_some() {
            return bad("mid block cannot resample or be remapped".into());
        }
        if m.in_channels != prev || m.out_channels != prev {
            return bad(format!("mid block must map {prev} -> {prev} channels"));
        }
        for (j, b) in self.up_blocks.iter().enumerate() {
            let w = format!("up block {j}");
            check_block(&w, b)?;
            if !matches!(b.kind, BlockKind::CrossAttnUp | BlockKind::Up) {
                return bad(format!("{w}: kind {:?} not allowed in the up path", b.kind));
            }
            if b.has_downsample {
                return bad(format!("{w}: up blocks cannot downsample"));
            }
            if b.in_channels != prev {
                return bad(format!("{w}: expects {} input channels, previous stage emits {prev}", b.in_channels));
            }
            let want = self.channel_schedule[levels - 1 - j];
            if b.out_channels != want {
                return bad(format!("{w}: emits {} channels, schedule says {want}", b.out_channels));
            }
            prev = b.out_channels;
        }
        self.skip_plan().map(|_| ())
    }

    /// Skip tensors `(channels, resolution level)` emitted by the down path,
    /// in emission order, after checking the up path consumes them exactly.
    pub fn skip_plan(&self) -> Result<Vec<(usize, usize)>> {
        let mut skips = vec![(self.channel_schedule[0], 0usize)];
        let mut level = 0;
        for b in &self.down_blocks {
            for _ in 0..b.rt_pairs {
                skips.push((b.out_channels, level));
            }
            if b.has_downsample {
                level += 1;
                skips.push((b.out_channels, level));
            }
        }
        let emitted = skips.clone();
        for (j, b) in self.up_blocks.iter().enumerate() {
            for k in 0..b.rt_pairs {
                let Some((_, lvl)) = skips.pop() else {
                    return Err(Error::Validation(format!(
                        "up block {j} pair {k} has no skip tensor left (down path emits {})",
                        emitted.len()
                    )));
                };
                if lvl != level {
                    return Err(Error::Validation(format!(
                        "up block {j} pair {k} runs at level {level} but its skip comes from level {lvl}"
                    )));
                }
            }
            if b.has_upsample {
                if level == 0 {
                    return Err(Error::Validation(format!("up block {j} upsamples past the input resolution")));
                }
                level -= 1;
            }
        }
        if !skips.is_empty() {
            return Err(Error::Validation(format!(
                "{} skip tensor(s) emitted by the down path are never consumed",
                skips.len()
            )));
        }
        if level != 0 {
            return Err(Error::Validation(format!("output ends at resolution level {level}, not 0")));
        }
        Ok(emitted)
    }

    /// Input channels of every resnet in up block `j`, accounting for skips.
    pub fn up_resnet_inputs(&self) -> Vec<Vec<usize>> {
        let mut skips: Vec<usize> = self.skip_plan().expect("validated spec").iter().map(|s| s.0).collect();
        let mut prev = self.mid_block.out_channels;
        let mut out = Vec::new();
        for b in &self.up_blocks {
            let mut ins = Vec::new();
            for _ in 0..b.rt_pairs {
                let s = skips.pop().unwrap();
                ins.push(prev + s);
                prev = b.out_channels;
            }
            out.push(ins);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(s: &UNetSpec) -> Vec<BlockKind> {
        s.down_blocks
            .iter()
            .chain(std::iter::once(&s.mid_block))
            .chain(&s.up_blocks)
            .map(|b| b.kind)
            .collect()
    }

    #[test]
    fn full_and_toy_share_topology() {
        let full = original_spec(Scale::Full);
        let toy = original_spec(Scale::Toy);
        full.validate().unwrap();
        toy.validate().unwrap();
        assert_eq!(kinds(&full), kinds(&toy));
        let pairs = |s: &UNetSpec| s.down_blocks.iter().chain(&s.up_blocks).map(|b| b.rt_pairs).collect::<Vec<_>>();
        assert_eq!(pairs(&full), pairs(&toy));
        assert_eq!(toy.channel_schedule, vec![32, 64, 128, 128]);
        assert_eq!((full.context_dim, full.num_heads), (768, 8));
        assert_eq!((toy.context_dim, toy.num_heads), (64, 2));
    }

    #[test]
    fn toy_down_path_emits_twelve_skips() {
        let toy = original_spec(Scale::Toy);
        // conv_in + 4 blocks x 2 pairs + 3 downsamplers
        let skips = toy.skip_plan().unwrap();
        assert_eq!(skips.len(), 1 + 4 * 2 + 3);
        let consumed: usize = toy.up_blocks.iter().map(|b| b.rt_pairs).sum();
        assert_eq!(consumed, 12);
    }

    #[test]
    fn student_layout() {
        let toy = original_spec(Scale::Toy);
        let s = student_spec(&toy).unwrap();
        assert!(s.down_blocks.iter().all(|b| b.kind == BlockKind::CrossAttnDown));
        assert!(s.up_blocks.iter().all(|b| b.kind == BlockKind::CrossAttnUp));
        assert!(s.down_blocks.iter().all(|b| b.rt_pairs == 1));
        assert!(s.up_blocks.iter().all(|b| b.rt_pairs == 2));
        assert_eq!(s.channel_schedule, vec![32, 64, 128]);
        assert_eq!(s.depth(), 2);
        assert_eq!(s.down_blocks[1].origin.as_ref().unwrap().pairs, vec![0]);
        // up blocks come from teacher up blocks 1..=3 and keep pairs 0 and 2
        let o = s.up_blocks[0].origin.as_ref().unwrap();
        assert_eq!((o.block, o.pairs.clone()), (1, vec![0, 2]));
        assert_eq!(student_spec(&toy).unwrap(), s);
    }

    #[test]
    fn pruning_twice_fails() {
        let s = student_spec(&original_spec(Scale::Full)).unwrap();
        assert!(matches!(student_spec(&s), Err(Error::Pruning(_))));
    }

    #[test]
    fn toml_roundtrip() {
        let s = student_spec(&original_spec(Scale::Toy)).unwrap();
        let text = s.to_toml().unwrap();
        assert_eq!(UNetSpec::from_toml(&text).unwrap(), s);
        let bad = text.replace("context_dim", "context_dims");
        assert!(UNetSpec::from_toml(&bad).is_err());
    }

    /// Every single-field mutation of a valid spec either breaks validation
    /// or still yields a layout whose forward pass is shape-correct (the
    /// latter is checked in the model tests).
    #[test]
    fn mutations_break_skip_bookkeeping() {
        let base = original_spec(Scale::Toy);
        let mut caught = 0;
        let mut total = 0;
        for path in 0..2 {
            for i in 0..4 {
                for field in 0..5 {
                    let mut s = base.clone();
                    let b = if path == 0 { &mut s.down_blocks[i] } else { &mut s.up_blocks[i] };
                    match field {
                        0 => b.rt_pairs += 1,
                        1 => b.in_channels += 8,
                        2 => b.out_channels += 8,
                        3 => b.has_downsample = !b.has_downsample,
                        _ => b.has_upsample = !b.has_upsample,
                    }
                    total += 1;
                    if s.validate().is_err() {
                        caught += 1;
                    }
                }
            }
        }
        assert_eq!(caught, total);
    }
}
