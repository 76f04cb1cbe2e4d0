// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

//! Control-plane access shared by single-owner and parallel pipelines.

use crate::error::StateError;
use crate::packet::Timestamp;
use crate::parallel::ParallelEngine;
use crate::pipeline::{Pipeline, StateDump, StateWrite};
use crate::program::PipelineConfig;
use crate::stage::StageStats;

pub trait ControlPlane {
    fn config(&self) -> &PipelineConfig;
    fn inspect_state(&self) -> StateDump;
    fn write_state_values(
        &mut self,
        stage: usize,
        values: &[u64],
        write: &StateWrite,
    ) -> Result<(), StateError>;
    fn write_global(&mut self, stage: usize, index: usize, value: u32) -> Result<(), StateError>;
    fn read_global(&self, stage: usize, index: usize) -> Option<u32>;
    fn evict_expired(&mut self, now: Timestamp) -> usize;
    fn stats(&self) -> Vec<StageStats>;
}

macro_rules! forward_control {
    ($ty:ty) => {
        impl ControlPlane for $ty {
            fn config(&self) -> &PipelineConfig {
                <$ty>::config(self)
            }
            fn inspect_state(&self) -> StateDump {
                <$ty>::inspect_state(self)
            }
            fn write_state_values(
                &mut self,
                stage: usize,
                values: &[u64],
                write: &StateWrite,
            ) -> Result<(), StateError> {
                <$ty>::write_state_values(self, stage, values, write)
            }
            fn write_global(
                &mut self,
                stage: usize,
                index: usize,
                value: u32,
            ) -> Result<(), StateError> {
                <$ty>::write_global(self, stage, index, value)
            }
            fn read_global(&self, stage: usize, index: usize) -> Option<u32> {
                <$ty>::read_global(self, stage, index)
            }
            fn evict_expired(&mut self, now: Timestamp) -> usize {
                <$ty>::evict_expired(self, now)
            }
            fn stats(&self) -> Vec<StageStats> {
                <$ty>::stats(self)
            }
        }
    };
}

forward_control!(Pipeline);
forward_control!(ParallelEngine);
