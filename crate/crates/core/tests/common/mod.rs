#![allow(dead_code)]

pub mod criteria;
pub mod gradcheck;
pub mod reference;
pub mod slimref;
