use serde::{Deserialize, Serialize};

use super::{crop_resize, extract_region, fuse, heatmap, Backbone, BackboneConfig, ImageTensor, Region, RegionConfig, TagHeads};
use crate::tensor::{no_grad, ParamStore, Result, SeededRng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualConfig {
    pub backbone: BackboneConfig,
    pub region: RegionConfig,
    pub n_tags: usize,
}

impl Default for VisualConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            region: RegionConfig::default(),
            n_tags: 12,
        }
    }
}

/// Where the region branch gets its crop from.
#[derive(Debug, Clone, Copy)]
pub enum RegionSource<'a> {
    /// Global branch only.
    None,
    /// Heat map of the current global backbone.
    Live,
    /// A previously extracted region.
    Fixed(&'a Region),
}

#[derive(Debug, Clone)]
pub struct BranchProbs {
    pub global: Tensor,
    pub region: Option<Tensor>,
    pub fusion: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct VisualForward {
    pub f_c: Tensor,
    pub f_g: Tensor,
    pub f_l: Option<Tensor>,
    pub f_f: Option<Tensor>,
    pub region: Option<Region>,
    pub probs: BranchProbs,
}

impl VisualForward {
    /// Input to the graph encoder: `f_f` when the region branch ran, else `f_g`.
    pub fn graph_input(&self) -> &Tensor {
        self.f_f.as_ref().unwrap_or(&self.f_g)
    }
}

/// Global and region backbones with their three classification heads.
#[derive(Debug, Clone)]
pub struct VisualModel {
    pub config: VisualConfig,
    pub global: Backbone,
    pub region: Backbone,
    pub heads: TagHeads,
}

impl VisualModel {
    pub fn new(store: &mut ParamStore, rng: &mut SeededRng, config: VisualConfig) -> Self {
        let global = Backbone::new(store, rng, "vis.global", config.backbone.clone());
        let region = Backbone::new(store, rng, "vis.region", config.backbone.clone());
        let heads = TagHeads::new(store, rng, "vis.heads", config.backbone.feature_dim(), config.n_tags);
        Self {
            config,
            global,
            region,
            heads,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.config.backbone.feature_dim()
    }

    /// Region selected by the current global backbone, without gradients.
    pub fn locate(&self, store: &ParamStore, image: &ImageTensor) -> Result<Region> {
        no_grad(|| {
            let (f_c, _) = self.global.forward(store, image)?;
            Ok(extract_region(&heatmap(&f_c)?, &self.config.region))
        })
    }

    pub fn forward(&self, store: &ParamStore, image: &ImageTensor, source: RegionSource<'_>) -> Result<VisualForward> {
        let (f_c, f_g) = self.global.forward(store, image)?;
        let region = match source {
            RegionSource::None => None,
            RegionSource::Live => Some(extract_region(&heatmap(&f_c)?, &self.config.region)),
            RegionSource::Fixed(r) => Some(r.clone()),
        };
        let Some(region) = region else {
            let global = self.heads.global_probs(store, &f_g)?;
            return Ok(VisualForward {
                f_c,
                f_g,
                f_l: None,
                f_f: None,
                region: None,
                probs: BranchProbs {
                    global,
                    region: None,
                    fusion: None,
                },
            });
        };
        let crop = crop_resize(image, &region)?;
        let (_, f_l) = self.region.forward(store, &crop)?;
        let f_f = fuse(&f_g, &f_l, self.config.region.fusion_op)?;
        let [global, region_p, fusion] = self.heads.branch_probs(store, &f_g, &f_l, &f_f)?;
        Ok(VisualForward {
            f_c,
            f_g,
            f_l: Some(f_l),
            f_f: Some(f_f),
            region: Some(region),
            probs: BranchProbs {
                global,
                region: Some(region_p),
                fusion: Some(fusion),
            },
        })
    }
}
