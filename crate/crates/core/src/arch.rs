//! Closed-form parameter and MAC counts for reference vision architectures,
//! before and after collapsing their MLP blocks.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::collapse::CountParams;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum ArchFamily {
    Vgg11,
    Vgg13,
    Vgg16,
    Vgg19,
    VitT16,
    VitS16,
    VitB16,
    VitL16,
    MixerB16,
    MixerL16,
}

impl ArchFamily {
    pub const ALL: [ArchFamily; 10] = [
        ArchFamily::Vgg11,
        ArchFamily::Vgg13,
        ArchFamily::Vgg16,
        ArchFamily::Vgg19,
        ArchFamily::VitT16,
        ArchFamily::VitS16,
        ArchFamily::VitB16,
        ArchFamily::VitL16,
        ArchFamily::MixerB16,
        ArchFamily::MixerL16,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchFamily::Vgg11 => "VGG11",
            ArchFamily::Vgg13 => "VGG13",
            ArchFamily::Vgg16 => "VGG16",
            ArchFamily::Vgg19 => "VGG19",
            ArchFamily::VitT16 => "ViT-T/16",
            ArchFamily::VitS16 => "ViT-S/16",
            ArchFamily::VitB16 => "ViT-B/16",
            ArchFamily::VitL16 => "ViT-L/16",
            ArchFamily::MixerB16 => "Mixer-B/16",
            ArchFamily::MixerL16 => "Mixer-L/16",
        }
    }
}

impl fmt::Display for ArchFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchFamily {
    type Err = Error;

    /// Case-insensitive; ignores `-`, `_`, `/` and spaces, so `vit-t/16`,
    /// `ViT_T16` and `vitt16` all parse.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | '/' | ' '))
            .flat_map(char::to_lowercase)
            .collect();
        ArchFamily::ALL
            .into_iter()
            .find(|f| {
                let canon: String = f
                    .name()
                    .chars()
                    .filter(|c| !matches!(c, '-' | '/'))
                    .flat_map(char::to_lowercase)
                    .collect();
                canon == key
            })
            .ok_or_else(|| Error::UnknownFamily(s.to_string()))
    }
}

/// A conv stage entry: output channels of a 3x3 same-padded conv, or a
/// 2x2 max-pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum VggStage {
    Conv(usize),
    Pool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum ArchDims {
    Vgg {
        stages: Vec<VggStage>,
        /// `25088 -> 4096 -> 4096 -> classes`.
        classifier: [usize; 4],
    },
    Vit {
        dim: usize,
        depth: usize,
        heads: usize,
        mlp_hidden: usize,
        patch: usize,
        image: usize,
        classes: usize,
    },
    Mixer {
        dim: usize,
        depth: usize,
        token_hidden: usize,
        channel_hidden: usize,
        patch: usize,
        image: usize,
        classes: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SiteKind {
    /// Two-layer classifier head (VGG).
    Classifier,
    /// Transformer feed-forward block.
    Mlp,
    /// Mixer token-mixing MLP.
    Token,
    /// Mixer channel-mixing MLP.
    Channel,
}

/// One `n_in -> n_hidden -> n_out` MLP that collapses to `n_in -> n_out`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CollapsibleSite {
    pub name: String,
    pub kind: SiteKind,
    pub n_in: usize,
    pub n_hidden: usize,
    pub n_out: usize,
    /// Times the MLP is applied per image (tokens or channels).
    pub applications: u64,
}

impl CollapsibleSite {
    /// Parameters removed by the fusion, biases included.
    pub fn param_delta(&self) -> i64 {
        let (i, h, o) = (self.n_in as i64, self.n_hidden as i64, self.n_out as i64);
        h * (i + o + 1) - i * o
    }

    /// MACs removed per image.
    pub fn mac_delta(&self) -> i64 {
        let (i, h, o) = (self.n_in as i64, self.n_hidden as i64, self.n_out as i64);
        self.applications as i64 * (h * (i + o) - i * o)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ArchDescriptor {
    pub family: ArchFamily,
    pub dims: ArchDims,
    /// In collapse order: the last MLP first.
    pub collapsible_sites: Vec<CollapsibleSite>,
}

/// What [`count_macs`] includes beyond weight layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacConvention {
    /// Count the `QKᵀ` and attention-times-`V` products of ViT blocks.
    /// Off by default; the reference MAC totals leave them out.
    pub attention_products: bool,
}

fn vgg_stages(family: ArchFamily) -> Vec<VggStage> {
    use VggStage::{Conv as C, Pool as P};
    let widths: &[&[usize]] = match family {
        ArchFamily::Vgg11 => &[&[64], &[128], &[256, 256], &[512, 512], &[512, 512]],
        ArchFamily::Vgg13 => &[&[64, 64], &[128, 128], &[256, 256], &[512, 512], &[512, 512]],
        ArchFamily::Vgg16 => &[
            &[64, 64],
            &[128, 128],
            &[256, 256, 256],
            &[512, 512, 512],
            &[512, 512, 512],
        ],
        _ => &[
            &[64, 64],
            &[128, 128],
            &[256, 256, 256, 256],
            &[512, 512, 512, 512],
            &[512, 512, 512, 512],
        ],
    };
    widths
        .iter()
        .flat_map(|block| block.iter().map(|&w| C(w)).chain(std::iter::once(P)))
        .collect()
}

/// Canonical descriptor of a family: 224x224 inputs, 1000 classes, 16x16
/// patches for the token models.
pub fn describe(family: ArchFamily) -> ArchDescriptor {
    use ArchFamily::*;
    let (dims, sites) = match family {
        Vgg11 | Vgg13 | Vgg16 | Vgg19 => {
            let classifier = [25088, 4096, 4096, 1000];
            let sites = vec![
                CollapsibleSite {
                    name: "classifier.fc2-fc3".into(),
                    kind: SiteKind::Classifier,
                    n_in: 4096,
                    n_hidden: 4096,
                    n_out: 1000,
                    applications: 1,
                },
                CollapsibleSite {
                    name: "classifier.fc1-fc23".into(),
                    kind: SiteKind::Classifier,
                    n_in: 25088,
                    n_hidden: 4096,
                    n_out: 1000,
                    applications: 1,
                },
            ];
            (
                ArchDims::Vgg {
                    stages: vgg_stages(family),
                    classifier,
                },
                sites,
            )
        }
        VitT16 | VitS16 | VitB16 | VitL16 => {
            let (dim, depth, heads) = match family {
                VitT16 => (192, 12, 3),
                VitS16 => (384, 12, 6),
                VitB16 => (768, 12, 12),
                _ => (1024, 24, 16),
            };
            let tokens = (224 / 16) * (224 / 16) + 1;
            let sites = (0..depth)
                .rev()
                .map(|b| CollapsibleSite {
                    name: format!("blocks.{b}.mlp"),
                    kind: SiteKind::Mlp,
                    n_in: dim,
                    n_hidden: 4 * dim,
                    n_out: dim,
                    applications: tokens as u64,
                })
                .collect();
            (
                ArchDims::Vit {
                    dim,
                    depth,
                    heads,
                    mlp_hidden: 4 * dim,
                    patch: 16,
                    image: 224,
                    classes: 1000,
                },
                sites,
            )
        }
        MixerB16 | MixerL16 => {
            let (dim, depth, token_hidden, channel_hidden) = match family {
                MixerB16 => (768, 12, 384, 3072),
                _ => (1024, 24, 512, 4096),
            };
            let patches = (224 / 16) * (224 / 16);
            let sites = (0..depth)
                .rev()
                .flat_map(|b| {
                    [
                        CollapsibleSite {
                            name: format!("blocks.{b}.mlp_channels"),
                            kind: SiteKind::Channel,
                            n_in: dim,
                            n_hidden: channel_hidden,
                            n_out: dim,
                            applications: patches as u64,
                        },
                        CollapsibleSite {
                            name: format!("blocks.{b}.mlp_tokens"),
                            kind: SiteKind::Token,
                            n_in: patches,
                            n_hidden: token_hidden,
                            n_out: patches,
                            applications: dim as u64,
                        },
                    ]
                })
                .collect();
            (
                ArchDims::Mixer {
                    dim,
                    depth,
                    token_hidden,
                    channel_hidden,
                    patch: 16,
                    image: 224,
                    classes: 1000,
                },
                sites,
            )
        }
    };
    ArchDescriptor {
        family,
        dims,
        collapsible_sites: sites,
    }
}

/// Looks a family up by name, see [`ArchFamily::from_str`].
pub fn describe_by_name(name: &str) -> Result<ArchDescriptor> {
    Ok(describe(name.parse()?))
}

impl CountParams for ArchDescriptor {
    fn count_params(&self) -> u64 {
        let dense = |i: usize, o: usize| (i * o + o) as u64;
        match &self.dims {
            ArchDims::Vgg { stages, classifier } => {
                let mut c = 3;
                let mut total = 0;
                for s in stages {
                    if let VggStage::Conv(w) = *s {
                        total += (9 * c * w + w) as u64;
                        c = w;
                    }
                }
                total + classifier.windows(2).map(|w| dense(w[0], w[1])).sum::<u64>()
            }
            &ArchDims::Vit {
                dim: d,
                depth,
                mlp_hidden,
                patch,
                image,
                classes,
                ..
            } => {
                let tokens = (image / patch).pow(2) + 1;
                let embed = dense(3 * patch * patch, d) + d as u64 + (tokens * d) as u64;
                let block =
                    2 * 2 * d as u64 + dense(d, 3 * d) + dense(d, d) + dense(d, mlp_hidden) + dense(mlp_hidden, d);
                embed + depth as u64 * block + 2 * d as u64 + dense(d, classes)
            }
            &ArchDims::Mixer {
                dim: d,
                depth,
                token_hidden,
                channel_hidden,
                patch,
                image,
                classes,
            } => {
                let s = (image / patch).pow(2);
                let embed = dense(3 * patch * patch, d);
                let block = 2 * 2 * d as u64
                    + dense(s, token_hidden)
                    + dense(token_hidden, s)
                    + dense(d, channel_hidden)
                    + dense(channel_hidden, d);
                embed + depth as u64 * block + 2 * d as u64 + dense(d, classes)
            }
        }
    }
}

/// MACs for one `resolution x resolution` RGB image. Norm layers,
/// activations, pooling and softmax are free.
pub fn count_macs(d: &ArchDescriptor, resolution: usize, conv: MacConvention) -> Result<u64> {
    match &d.dims {
        ArchDims::Vgg { stages, classifier } => {
            let pools = stages.iter().filter(|s| **s == VggStage::Pool).count();
            if resolution == 0 || !resolution.is_multiple_of(1 << pools) {
                return Err(Error::Unsupported(format!(
                    "VGG input resolution must be a positive multiple of {}",
                    1 << pools
                )));
            }
            let (mut c, mut h) = (3u64, resolution as u64);
            let mut total = 0u64;
            for s in stages {
                match *s {
                    VggStage::Conv(w) => {
                        total += 9 * c * w as u64 * h * h;
                        c = w as u64;
                    }
                    VggStage::Pool => h /= 2,
                }
            }
            // the classifier sees a fixed 7x7 map after adaptive pooling
            Ok(total + classifier.windows(2).map(|w| (w[0] * w[1]) as u64).sum::<u64>())
        }
        &ArchDims::Vit {
            dim,
            depth,
            mlp_hidden,
            patch,
            classes,
            ..
        } => {
            if resolution == 0 || !resolution.is_multiple_of(patch) {
                return Err(Error::Unsupported(format!(
                    "ViT input resolution must be a positive multiple of the patch size {patch}"
                )));
            }
            let (d, h) = (dim as u64, mlp_hidden as u64);
            let patches = ((resolution / patch) as u64).pow(2);
            let t = patches + 1;
            let embed = patches * (3 * (patch * patch) as u64) * d;
            let mut block = t * (3 * d * d + d * d + 2 * d * h);
            if conv.attention_products {
                block += 2 * t * t * d;
            }
            Ok(embed + depth as u64 * block + d * classes as u64)
        }
        &ArchDims::Mixer {
            dim,
            depth,
            token_hidden,
            channel_hidden,
            patch,
            image,
            classes,
        } => {
            if resolution != image {
                return Err(Error::Unsupported(format!(
                    "Mixer token MLPs are tied to {image}x{image} inputs"
                )));
            }
            let (d, s) = (dim as u64, ((image / patch) as u64).pow(2));
            let embed = s * (3 * (patch * patch) as u64) * d;
            let block = d * 2 * s * token_hidden as u64 + s * 2 * d * channel_hidden as u64;
            Ok(embed + depth as u64 * block + d * classes as u64)
        }
    }
}

/// Totals after collapsing the first `layers` sites (in collapse order).
/// Mixer sites go in token/channel pairs, so `layers` must be even there.
pub fn collapse_accounting(d: &ArchDescriptor, layers: usize, conv: MacConvention) -> Result<(u64, u64)> {
    if layers > d.collapsible_sites.len() {
        return Err(Error::Contract(format!(
            "{} has {} collapsible MLPs, asked to collapse {layers}",
            d.family,
            d.collapsible_sites.len()
        )));
    }
    if matches!(d.dims, ArchDims::Mixer { .. }) && !layers.is_multiple_of(2) {
        return Err(Error::Contract(format!(
            "{} collapses token and channel MLPs in pairs; {layers} is odd",
            d.family
        )));
    }
    let image = match d.dims {
        ArchDims::Vgg { .. } => 224,
        ArchDims::Vit { image, .. } | ArchDims::Mixer { image, .. } => image,
    };
    let sites = &d.collapsible_sites[..layers];
    let params = d.count_params() as i64 - sites.iter().map(CollapsibleSite::param_delta).sum::<i64>();
    let macs = count_macs(d, image, conv)? as i64 - sites.iter().map(CollapsibleSite::mac_delta).sum::<i64>();
    Ok((params as u64, macs as u64))
}

/// Fractions of parameters and MACs removed by collapsing every site.
pub fn mlp_share(d: &ArchDescriptor, conv: MacConvention) -> Result<(f64, f64)> {
    let (p0, m0) = collapse_accounting(d, 0, conv)?;
    let (p1, m1) = collapse_accounting(d, d.collapsible_sites.len(), conv)?;
    Ok(((p0 - p1) as f64 / p0 as f64, (m0 - m1) as f64 / m0 as f64))
}

/// Collapse counts of the reference compression table, per family.
pub const REFERENCE_COLLAPSES: &[(ArchFamily, &[usize])] = &[
    (ArchFamily::VitT16, &[0, 1, 2, 3]),
    (ArchFamily::VitS16, &[0, 1, 2]),
    (ArchFamily::VitB16, &[0, 1, 2]),
    (ArchFamily::VitL16, &[0, 2]),
    (ArchFamily::MixerB16, &[0, 2, 4]),
    (ArchFamily::Vgg19, &[0, 2]),
    (ArchFamily::Vgg16, &[0, 2]),
    (ArchFamily::Vgg13, &[0, 2]),
    (ArchFamily::Vgg11, &[0, 2]),
];

/// Families listed in the MLP-share table.
pub const SHARE_FAMILIES: [ArchFamily; 6] = [
    ArchFamily::VitT16,
    ArchFamily::VitB16,
    ArchFamily::VitL16,
    ArchFamily::MixerB16,
    ArchFamily::MixerL16,
    ArchFamily::Vgg16,
];
