//! Integrated density of states for subordinate random walks on the
//! one-sided Sierpinski gasket with Poissonian soft obstacles.

pub mod gasket;
pub mod operators;
pub mod potentials;
pub mod lab;
pub mod montecarlo;
pub mod spectra;

pub mod rng {
    //! Seeded random streams. Each task gets stream `index` of the master seed.
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub fn stream_rng(master: u64, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(master);
        rng.set_stream(index);
        rng
    }
}
