//! Shared fixtures for the benchmarks: one full-scale realization with its
//! designs and both measurement sets.

use mmwave_chest::beam_design::{build_designs, SoundingDesign, DEFAULT_SEARCH_SAMPLES};
use mmwave_chest::harness::trial_inputs;
use mmwave_chest::sounding::{sound, MeasurementSet, NoiseLevel, SoundingMode};
use mmwave_chest::{ChannelRealization, SystemConfig};

pub struct Fixture {
    pub system: SystemConfig,
    pub design: SoundingDesign,
    pub realization: ChannelRealization,
    pub tde: MeasurementSet,
    pub ems: MeasurementSet,
}

impl Fixture {
    pub fn new(snr_db: f64) -> Self {
        let system = SystemConfig::default();
        let design = build_designs(&system, DEFAULT_SEARCH_SAMPLES).expect("default design");
        let (realization, tde_seed, ems_seed) = trial_inputs(&system, 1, 0).expect("realization");
        let noise = NoiseLevel::SnrDb(snr_db);
        let tde = sound(&design, &realization, SoundingMode::Tde, noise, tde_seed).expect("tde sounding");
        let ems = sound(&design, &realization, SoundingMode::Ems, noise, ems_seed).expect("ems sounding");
        Self {
            system,
            design,
            realization,
            tde,
            ems,
        }
    }
}
