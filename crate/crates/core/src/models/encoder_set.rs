use super::config::EncoderConfig;
use super::networks::EncoderArch;
use crate::backend::ParamStore;
use crate::error::Result;

/// The four pre-training encoders: transverse query/momentum (`f_q`, `f_m`)
/// and longitudinal query/momentum (`g_q`, `g_m`).
///
/// With sharing enabled the two query encoders are one store, and likewise
/// the two momentum encoders, so they cannot drift apart.
#[derive(Clone, Debug)]
pub struct EncoderSet {
    config: EncoderConfig,
    arch: EncoderArch,
    query: ParamStore,
    momentum: ParamStore,
    g_query: Option<ParamStore>,
    g_momentum: Option<ParamStore>,
}

impl EncoderSet {
    /// All four encoders start from identical weights.
    pub fn new(config: &EncoderConfig, seed: u64, share_query: bool, share_momentum: bool) -> Result<Self> {
        let (arch, store) = EncoderArch::build(config, seed)?;
        Ok(EncoderSet {
            config: config.clone(),
            arch,
            momentum: store.clone(),
            g_query: (!share_query).then(|| store.clone()),
            g_momentum: (!share_momentum).then(|| store.clone()),
            query: store,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn arch(&self) -> &EncoderArch {
        &self.arch
    }

    pub fn share_query(&self) -> bool {
        self.g_query.is_none()
    }

    pub fn share_momentum(&self) -> bool {
        self.g_momentum.is_none()
    }

    pub fn f_q(&self) -> &ParamStore {
        &self.query
    }

    pub fn g_q(&self) -> &ParamStore {
        self.g_query.as_ref().unwrap_or(&self.query)
    }

    pub fn f_m(&self) -> &ParamStore {
        &self.momentum
    }

    pub fn g_m(&self) -> &ParamStore {
        self.g_momentum.as_ref().unwrap_or(&self.momentum)
    }

    pub fn f_q_mut(&mut self) -> &mut ParamStore {
        &mut self.query
    }

    pub fn g_q_mut(&mut self) -> &mut ParamStore {
        self.g_query.as_mut().unwrap_or(&mut self.query)
    }

    pub fn f_m_mut(&mut self) -> &mut ParamStore {
        &mut self.momentum
    }

    pub fn g_m_mut(&mut self) -> &mut ParamStore {
        self.g_momentum.as_mut().unwrap_or(&mut self.momentum)
    }

    /// Mutable access to the transverse and longitudinal query stores at
    /// once; `None` for the second when they are shared.
    pub fn query_stores_mut(&mut self) -> (&mut ParamStore, Option<&mut ParamStore>) {
        (&mut self.query, self.g_query.as_mut())
    }

    /// `(query, momentum)` pairs for the EMA update, one per distinct
    /// momentum store.
    pub fn ema_pairs_mut(&mut self) -> Vec<(&ParamStore, &mut ParamStore)> {
        let g_q = self.g_query.as_ref().unwrap_or(&self.query);
        let mut pairs = vec![(&self.query, &mut self.momentum)];
        if let Some(gm) = self.g_momentum.as_mut() {
            pairs.push((g_q, gm));
        }
        pairs
    }

    /// Overwrites every encoder with `weights` (query weights are copied into
    /// the momentum encoders as well).
    pub fn load_all(&mut self, weights: &ParamStore) -> Result<()> {
        for store in [Some(&mut self.query), Some(&mut self.momentum), self.g_query.as_mut(), self.g_momentum.as_mut()]
            .into_iter()
            .flatten()
        {
            store.copy_prefix_from(weights, "")?;
        }
        Ok(())
    }
}
