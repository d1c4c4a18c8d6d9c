//! Task embeddings, dissimilarity, spectral grouping and representation
//! similarity.

pub mod cka;
pub mod dissimilarity;
pub mod fim;
pub mod spectral;

pub use cka::cka_linear;
pub use dissimilarity::{dissimilarity_matrix, pair_dissimilarity, DissimilarityMatrix};
pub use fim::{fim_diagonal, fim_diagonal_with, fisher_network, FisherNetwork, HeadFit, ProbeSpec, TaskEmbedding};
pub use spectral::{kmeans, oracle_group, spectral_embedding, spectral_group, GroupAssignment, SpectralDecomposition};
