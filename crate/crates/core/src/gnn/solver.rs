use super::model::GnnModel;
use crate::channel::{BeamformerSet, NetworkInstance};
use crate::fp::{run_solver, AuxState, BeamformerUpdate, FpError, SolverTrace};
use crate::reform::{build_subproblem, QuadraticSubproblem};

/// Classical FP with the per-cell update predicted by a GNN. All cells of an
/// iteration go through the network as one batch.
#[derive(Debug, Clone, Copy)]
pub struct GnnUpdate<'a> {
    pub model: &'a GnnModel,
}

impl BeamformerUpdate for GnnUpdate<'_> {
    fn name(&self) -> String {
        "gnnfp".into()
    }

    fn update(
        &mut self,
        inst: &NetworkInstance,
        aux: &AuxState,
        v: &BeamformerSet,
    ) -> Result<BeamformerSet, FpError> {
        let subs: Vec<QuadraticSubproblem> = (0..inst.cells())
            .map(|cell| build_subproblem(inst, aux, cell))
            .collect();
        let preds = self
            .model
            .predict(&subs.iter().collect::<Vec<_>>())
            .map_err(|e| FpError::NumericalFailure(e.to_string()))?;
        let mut out = v.clone();
        for (sub, pred) in subs.iter().zip(preds) {
            out.set_cell(sub.cell_index, sub.unstack(&pred)?);
        }
        Ok(out)
    }
}

pub fn gnnfp(
    inst: &NetworkInstance,
    v0: &BeamformerSet,
    iters: usize,
    model: &GnnModel,
) -> Result<(BeamformerSet, SolverTrace), FpError> {
    run_solver(inst, v0, iters, &mut GnnUpdate { model })
}
