#![allow(dead_code)]

pub mod canny_ref;
pub mod gradcheck;
pub mod corpus;
pub mod fid_oracle;
