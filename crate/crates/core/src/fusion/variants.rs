use super::{fuse_tables, FusionParams};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::tensor::Float;

/// Region representations compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    PoiOnly,
    SvOnly,
    RvOnly,
    AddSvrv,
    FusionSvrv,
    Concat,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::PoiOnly,
        Variant::SvOnly,
        Variant::RvOnly,
        Variant::AddSvrv,
        Variant::FusionSvrv,
        Variant::Concat,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::PoiOnly => "poi_only",
            Variant::SvOnly => "sv_only",
            Variant::RvOnly => "rv_only",
            Variant::AddSvrv => "add_svrv",
            Variant::FusionSvrv => "fusion_svrv",
            Variant::Concat => "concat",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

pub struct VariantInputs<'a, T> {
    pub sv: &'a EmbeddingTable<T>,
    pub rv: &'a EmbeddingTable<T>,
    pub poi: &'a EmbeddingTable<T>,
    /// Attention parameters before alignment.
    pub untrained: &'a FusionParams<T>,
    /// Post-alignment fused embeddings.
    pub full: &'a EmbeddingTable<T>,
}

pub fn variant_embeddings<T: Float>(mode: Variant, inputs: &VariantInputs<'_, T>) -> Result<EmbeddingTable<T>> {
    let n = inputs.sv.len();
    if [inputs.rv.len(), inputs.poi.len(), inputs.full.len()].iter().any(|&l| l != n) {
        return Err(Error::contract("variant inputs cover different region counts"));
    }
    match mode {
        Variant::PoiOnly => Ok(inputs.poi.clone()),
        Variant::SvOnly => Ok(inputs.sv.clone()),
        Variant::RvOnly => Ok(inputs.rv.clone()),
        Variant::AddSvrv => {
            if inputs.sv.dim() != inputs.rv.dim() {
                return Err(Error::dim("add_svrv", &[inputs.sv.dim()], &[inputs.rv.dim()]));
            }
            let data = inputs.sv.data().iter().zip(inputs.rv.data()).map(|(&a, &b)| a + b).collect();
            EmbeddingTable::new(inputs.sv.dim(), data)
        }
        Variant::FusionSvrv => Ok(fuse_tables(inputs.untrained, inputs.sv, inputs.rv)?.0),
        Variant::Concat => EmbeddingTable::concat(&[inputs.sv, inputs.rv, inputs.poi]),
        Variant::Full => Ok(inputs.full.clone()),
    }
}
