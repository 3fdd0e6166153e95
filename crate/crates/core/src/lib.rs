//! Fast reconstruction of in-memory B+-tree indexes by sorting only the
//! distinction bits of index keys.
pub mod bits;
pub mod dbits;
pub mod keycodec;
pub mod table;
pub mod metadata;
pub mod rcsort;
pub mod indextree;
pub mod rebuild;
pub mod datagen;
