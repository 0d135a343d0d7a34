//! Statistical evaluation toolkit for blind, randomized comparisons of
//! robot manipulation policies.

pub mod comparison;
pub mod datatools;
pub mod posterior;
pub mod protocol;
pub mod report;
pub mod rollout;
pub mod scoring;
pub mod synthlab;
