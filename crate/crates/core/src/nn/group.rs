use super::adam::{AdamConfig, AdamState};
use super::dense::{DenseNet, NetGrads};
use crate::error::{Error, Result};

/// A model made of several dense networks updated together.
pub trait ParamGroup {
    fn nets(&self) -> Vec<&DenseNet>;
    fn nets_mut(&mut self) -> Vec<&mut DenseNet>;

    fn zero_grads(&self) -> Vec<NetGrads> {
        self.nets().into_iter().map(NetGrads::zeros_like).collect()
    }

    fn fingerprints(&self) -> Vec<String> {
        self.nets().into_iter().map(DenseNet::fingerprint).collect()
    }
}

impl ParamGroup for DenseNet {
    fn nets(&self) -> Vec<&DenseNet> {
        vec![self]
    }

    fn nets_mut(&mut self) -> Vec<&mut DenseNet> {
        vec![self]
    }
}

/// One Adam state per network of a [`ParamGroup`].
#[derive(Debug, Clone)]
pub struct GroupOptimizer {
    states: Vec<AdamState>,
}

impl GroupOptimizer {
    pub fn new(group: &impl ParamGroup, config: AdamConfig) -> Self {
        Self { states: group.nets().into_iter().map(|n| AdamState::new(n, config)).collect() }
    }

    pub fn step(&mut self, group: &mut impl ParamGroup, grads: &[NetGrads]) -> Result<()> {
        let nets = group.nets_mut();
        if nets.len() != self.states.len() || grads.len() != self.states.len() {
            return Err(Error::Dimension("optimizer/group size mismatch".into()));
        }
        for ((state, net), g) in self.states.iter_mut().zip(nets).zip(grads) {
            state.step(net, g)?;
        }
        Ok(())
    }
}

pub fn scale_all(grads: &mut [NetGrads], factor: f64) {
    grads.iter_mut().for_each(|g| g.scale(factor));
}
