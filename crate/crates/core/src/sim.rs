//! Seeded Monte-Carlo sweeps over designs, Eb/N0 points and channels.
//!
//! Every cell `(design, Eb/N0, channel)` runs one block of `B` complex
//! symbols per used subcarrier through the complete chain
//!
//! * UL: OQAM staggering, synthesis bank, channel and noise, analysis bank,
//!   per-subcarrier equalizer with decision feedback;
//! * DL: precoder (THP or linear), synthesis bank, channel and noise,
//!   analysis bank, scalar receiver with modulo.
//!
//! Random streams are derived from the master seed and the cell coordinates
//! only. The channel depends on the channel index; data bits and noise depend
//! on the channel index and the Eb/N0 value but not on the design, so all
//! designs see common random numbers. Channels are the unit of parallelism
//! and results are aggregated in channel order, so the output does not
//! depend on the number of worker threads.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::channel::{apply_channel, generate_channel, response_len, total_subchannel_response, ChannelRealization};
use crate::config::{Design, Latency, SimConfig};
use crate::equalizer::{design_dfe, design_linear, dfe_run, select_latency, FeedbackMode, UlFilterSet};
use crate::error::{Error, Result};
use crate::filterbank::{phased_inputs, modulated_filter, FilterBank, PrototypeFilter};
use crate::matrices::{assemble, Dims, SubchannelMatrixSet, SubchannelResponses};
use crate::oqam::{oqam_destagger, oqam_stagger, Qam, QamGrid, RealSymbolStream};
use crate::thp::{dl_receive, sc_mse_duality, sum_mse_duality, thp_precode, DlFilterSet, Duality, DualityParams};

/// Pseudo-SNR convention: `sigma_eta^2 = E_s (M_u / M) / (log2(Q) 10^(Eb/N0 / 10))`
/// for complex symbols of energy `E_s` and a unit-energy channel.
pub fn noise_variance_from_ebn0(ebn0_db: f64, q: usize, symbol_energy: f64, m: usize, m_u: usize) -> f64 {
    symbol_energy * (m_u as f64 / m as f64) / ((q as f64).log2() * 10f64.powf(ebn0_db / 10.0))
}

/// Mean squared difference of two equally long sequences.
pub fn empirical_mse(reference: &[f64], estimates: &[f64]) -> Result<f64> {
    if reference.len() != estimates.len() {
        return Err(Error::Dimension(format!(
            "{} reference values for {} estimates",
            reference.len(),
            estimates.len()
        )));
    }
    if reference.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = reference.iter().zip(estimates).map(|(r, e)| (e - r) * (e - r)).sum();
    Ok(s / reference.len() as f64)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from the master seed and coordinates.
pub fn derive_seed(master: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix64(master), |h, &c| splitmix64(h ^ splitmix64(c)))
}

const STREAM_CHANNEL: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_NOISE: u64 = 3;

/// Latencies of the two filter families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Latencies {
    pub linear: usize,
    pub feedback: usize,
}

/// Responses and matrix sets of one channel realization.
#[derive(Debug, Clone)]
pub struct ChannelContext {
    pub index: usize,
    pub channel: ChannelRealization,
    pub responses: Vec<SubchannelResponses>,
    pub linear_sets: Vec<SubchannelMatrixSet>,
    pub feedback_sets: Vec<SubchannelMatrixSet>,
}

impl ChannelContext {
    pub fn sets(&self, design: Design) -> &[SubchannelMatrixSet] {
        if design.is_linear() {
            &self.linear_sets
        } else {
            &self.feedback_sets
        }
    }
}

/// Result of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub design: Design,
    pub ebn0_db: f64,
    pub channel: usize,
    pub bit_errors: u64,
    pub n_bits: u64,
    /// Subcarrier-averaged analytic MSE of the designed filters.
    pub mse_analytic: f64,
    pub squared_error: f64,
    pub n_estimates: u64,
    /// `sum_k ||f_1,k||^2` of a DL design.
    pub transmit_power: Option<f64>,
}

impl CellRecord {
    pub fn ber(&self) -> f64 {
        self.bit_errors as f64 / self.n_bits.max(1) as f64
    }

    pub fn mse_empirical(&self) -> f64 {
        self.squared_error / self.n_estimates.max(1) as f64
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub design: Design,
    pub ebn0_db: f64,
    pub ber: f64,
    pub mse_analytic: f64,
    pub mse_empirical: f64,
    pub n_bits: u64,
    pub n_channels: usize,
    pub seed: u64,
}

/// Aggregated sweep output, rows ordered by design then Eb/N0.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRunResult {
    pub rows: Vec<ResultRow>,
    /// Header lines (without the leading `#`).
    pub header: Vec<String>,
}

pub const CSV_COLUMNS: &str = "design,ebn0_db,ber,mse_analytic,mse_empirical,n_bits,n_channels,seed";

impl SimRunResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for h in &self.header {
            s.push_str("# ");
            s.push_str(h);
            s.push('\n');
        }
        s.push_str(CSV_COLUMNS);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:e},{:e},{:e},{},{},{}\n",
                r.design, r.ebn0_db, r.ber, r.mse_analytic, r.mse_empirical, r.n_bits, r.n_channels, r.seed
            ));
        }
        s
    }

    /// Writes the CSV through a temporary file in the target directory and
    /// renames it into place.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn row(&self, design: Design, ebn0_db: f64) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.design == design && r.ebn0_db == ebn0_db)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("output path {} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Immutable state shared by all cells of a sweep.
pub struct Simulator {
    cfg: SimConfig,
    qam: Qam,
    tau: f64,
    proto: PrototypeFilter,
    bank: FilterBank,
    n: usize,
    latencies: Latencies,
}

impl Simulator {
    /// Validates `cfg`, designs the prototype and resolves the latencies.
    pub fn new(cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let qam = cfg.qam()?;
        let tau = cfg.tau_value()?;
        let proto = PrototypeFilter::design(cfg.m, cfg.overlap, cfg.rolloff)?;
        let bank = FilterBank::new(proto.clone());
        let n = response_len(&proto, cfg.l_ch);
        let mut sim = Self {
            cfg,
            qam,
            tau,
            proto,
            bank,
            n,
            latencies: Latencies { linear: 0, feedback: 0 },
        };
        sim.latencies = match sim.cfg.nu {
            Latency::Fixed(nu) => {
                Dims::new(sim.cfg.l_lin, 0, n, nu)?;
                Dims::new(sim.cfg.l_f, sim.cfg.l_b, n, nu)?;
                Latencies { linear: nu, feedback: nu }
            }
            Latency::Auto => sim.auto_latencies()?,
        };
        Ok(sim)
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn prototype(&self) -> &PrototypeFilter {
        &self.proto
    }

    pub fn qam(&self) -> Qam {
        self.qam
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Length `N` of the subchannel responses.
    pub fn response_len(&self) -> usize {
        self.n
    }

    pub fn latencies(&self) -> Latencies {
        self.latencies
    }

    pub fn dims(&self, design: Design) -> Dims {
        if design.is_linear() {
            Dims { l_f: self.cfg.l_lin, l_b: 0, n: self.n, nu: self.latencies.linear }
        } else {
            Dims { l_f: self.cfg.l_f, l_b: self.cfg.l_b, n: self.n, nu: self.latencies.feedback }
        }
    }

    pub fn noise_variance(&self, ebn0_db: f64) -> f64 {
        noise_variance_from_ebn0(ebn0_db, self.cfg.q, self.qam.symbol_energy(), self.cfg.m, self.cfg.m_u)
    }

    fn used(&self) -> std::ops::Range<usize> {
        let first = self.cfg.first_subcarrier();
        first..first + self.cfg.m_u
    }

    /// Channel realization `index`.
    pub fn channel(&self, index: usize) -> Result<ChannelRealization> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[STREAM_CHANNEL, index as u64]));
        generate_channel(
            &mut rng,
            &self.cfg.profile.power_delay_profile(),
            self.cfg.sample_rate,
            self.cfg.l_ch,
        )
    }

    /// Subchannel responses of every used subcarrier.
    pub fn responses(&self, channel: &ChannelRealization) -> Result<Vec<SubchannelResponses>> {
        let used = self.used();
        used.clone()
            .map(|k| {
                let neighbour = |l: usize| -> Result<Option<Vec<_>>> {
                    if used.contains(&l) {
                        Ok(Some(total_subchannel_response(&self.proto, l, k, channel)?.g))
                    } else {
                        Ok(None)
                    }
                };
                Ok(SubchannelResponses {
                    k,
                    own: total_subchannel_response(&self.proto, k, k, channel)?.g,
                    lower: if k == 0 { None } else { neighbour(k - 1)? },
                    upper: neighbour(k + 1)?,
                    noise_filter: modulated_filter(&self.proto, k)?,
                    step: self.proto.step(),
                })
            })
            .collect()
    }

    fn assemble_band(&self, responses: &[SubchannelResponses], dims: Dims) -> Result<Vec<SubchannelMatrixSet>> {
        let sx2 = self.qam.half_symbol_variance();
        responses.iter().map(|r| assemble(r, dims, sx2)).collect()
    }

    pub fn channel_context(&self, index: usize) -> Result<ChannelContext> {
        let channel = self.channel(index)?;
        let responses = self.responses(&channel)?;
        let linear_sets = self.assemble_band(&responses, self.dims(Design::LinearUl))?;
        let feedback_sets = self.assemble_band(&responses, self.dims(Design::DfeUl))?;
        Ok(ChannelContext {
            index,
            channel,
            responses,
            linear_sets,
            feedback_sets,
        })
    }

    /// Mean UL MSE over latencies on channel 0 at the reference Eb/N0; the
    /// smallest latency wins ties.
    fn auto_latencies(&self) -> Result<Latencies> {
        let channel = self.channel(0)?;
        let responses = self.responses(&channel)?;
        let nv = self.noise_variance(self.cfg.nu_ref_ebn0_db);
        let pick = |l_f: usize, l_b: usize| -> Result<usize> {
            let max = self.n + l_f - 2;
            let (nu, _) = select_latency(0..=max, |nu| {
                let sets = self.assemble_band(&responses, Dims::new(l_f, l_b, self.n, nu)?)?;
                let total = sets
                    .iter()
                    .map(|s| design_dfe(s, nv).map(|f| f.mse_analytic))
                    .sum::<Result<f64>>()?;
                Ok(total / sets.len() as f64)
            })?;
            Ok(nu)
        };
        Ok(Latencies {
            linear: pick(self.cfg.l_lin, 0)?,
            feedback: pick(self.cfg.l_f, self.cfg.l_b)?,
        })
    }

    /// UL filters of the family of `design`.
    pub fn design_ul(&self, ctx: &ChannelContext, design: Design, noise_var: f64) -> Result<UlFilterSet> {
        let sets = ctx.sets(design);
        let filters = sets
            .iter()
            .map(|s| {
                if design.is_linear() {
                    design_linear(s, noise_var)
                } else {
                    design_dfe(s, noise_var)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(UlFilterSet {
            first_subcarrier: self.cfg.first_subcarrier(),
            dims: self.dims(design),
            filters,
        })
    }

    pub fn duality_params(&self, design: Design, noise_var: f64) -> DualityParams {
        DualityParams {
            noise_var,
            hp_energy: self.proto.energy(),
            tau: (!design.is_linear()).then_some(self.tau),
        }
    }

    /// DL filters of a DL design.
    pub fn design_dl(&self, ctx: &ChannelContext, design: Design, noise_var: f64) -> Result<DlFilterSet> {
        let ul = self.design_ul(ctx, design, noise_var)?;
        let params = self.duality_params(design, noise_var);
        match design.duality() {
            Some(Duality::SumMse) => sum_mse_duality(&ul, ctx.sets(design), params),
            Some(Duality::SubcarrierMse) => sc_mse_duality(&ul, ctx.sets(design), params),
            None => Err(Error::Config(format!("{design} is not a downlink design"))),
        }
    }

    /// Random data of one block: bits and the staggered half-symbols.
    pub fn block_data(&self, channel: usize, ebn0_db: f64) -> Result<(QamGrid, RealSymbolStream)> {
        let seed = derive_seed(self.cfg.seed, &[STREAM_DATA, channel as u64, ebn0_db.to_bits()]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_bits = self.cfg.m_u * self.cfg.block_len * self.qam.bits_per_symbol();
        let bits: Vec<u8> = (0..n_bits).map(|_| rng.random::<bool>() as u8).collect();
        let grid = QamGrid::from_bits(self.qam, &bits, self.cfg.m_u)?;
        let stream = oqam_stagger(&grid, self.cfg.first_subcarrier());
        Ok((grid, stream))
    }

    fn noise_rng(&self, channel: usize, ebn0_db: f64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[STREAM_NOISE, channel as u64, ebn0_db.to_bits()]))
    }

    /// Passes per-subcarrier complex input sequences through the synthesis
    /// bank, the channel with noise, and the analysis bank.
    pub fn transmit(
        &self,
        inputs: &[Vec<num_complex::Complex64>],
        channel: &ChannelRealization,
        noise_var: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec<num_complex::Complex64>>> {
        let signal = self.bank.synthesize(self.cfg.first_subcarrier(), inputs)?;
        let rx = apply_channel(&signal, channel, noise_var, rng);
        self.bank.analyze(&rx, self.used())
    }

    /// Runs one cell; errors carry the cell coordinates.
    pub fn run_cell(&self, ctx: &ChannelContext, design: Design, ebn0_db: f64) -> Result<CellRecord> {
        self.run_cell_with(ctx, design, ebn0_db, false)
    }

    /// Like [`Simulator::run_cell`], but UL feedback uses the transmitted
    /// half-symbols instead of decisions (no error propagation). DL cells are
    /// unaffected.
    pub fn run_cell_genie(&self, ctx: &ChannelContext, design: Design, ebn0_db: f64) -> Result<CellRecord> {
        self.run_cell_with(ctx, design, ebn0_db, true)
    }

    fn run_cell_with(&self, ctx: &ChannelContext, design: Design, ebn0_db: f64, genie: bool) -> Result<CellRecord> {
        self.run_cell_inner(ctx, design, ebn0_db, genie).map_err(|e| Error::Cell {
            design: design.name().to_string(),
            ebn0_db,
            channel: ctx.index,
            source: Box::new(e),
        })
    }

    fn run_cell_inner(&self, ctx: &ChannelContext, design: Design, ebn0_db: f64, genie: bool) -> Result<CellRecord> {
        let nv = self.noise_variance(ebn0_db);
        let (grid, stream) = self.block_data(ctx.index, ebn0_db)?;
        let len = stream.len();
        let mut rng = self.noise_rng(ctx.index, ebn0_db);
        let (estimates, reference, mse_analytic, transmit_power) = if design.is_downlink() {
            let dl = self.design_dl(ctx, design, nv)?;
            let pre = thp_precode(&stream, &dl)?;
            let y = self.transmit(&pre.transmit, &ctx.channel, nv, &mut rng)?;
            let out = dl_receive(&y, &dl, len)?;
            let decisions = RealSymbolStream {
                first_subcarrier: stream.first_subcarrier,
                values: out
                    .estimates
                    .values
                    .iter()
                    .map(|row| row.iter().map(|&x| self.qam.slice_axis(x)).collect())
                    .collect(),
            };
            let power = dl.transmit_power();
            (
                (out.pre_modulo, decisions),
                pre.targets,
                dl.mean_mse(),
                Some(power),
            )
        } else {
            let ul = self.design_ul(ctx, design, nv)?;
            let y = self.transmit(&phased_inputs(&stream), &ctx.channel, nv, &mut rng)?;
            let mode = if genie {
                FeedbackMode::Genie(&stream)
            } else {
                FeedbackMode::Decision
            };
            let out = dfe_run(&y, &ul, self.qam, mode, len)?;
            ((out.estimates, out.decisions), stream.clone(), ul.mean_mse(), None)
        };
        let (soft, hard) = estimates;

        let t = self.cfg.transient();
        let counted = t..len.saturating_sub(t).max(t);
        let mut squared_error = 0.0;
        let mut n_estimates = 0u64;
        for (e_row, r_row) in soft.values.iter().zip(&reference.values) {
            squared_error += e_row[counted.clone()]
                .iter()
                .zip(&r_row[counted.clone()])
                .map(|(e, r)| (e - r) * (e - r))
                .sum::<f64>();
            n_estimates += counted.len() as u64;
        }

        let decided = oqam_destagger(&hard, self.qam)?;
        let (bit_errors, n_bits) = count_bit_errors(&grid, &decided, counted.clone());
        Ok(CellRecord {
            design,
            ebn0_db,
            channel: ctx.index,
            bit_errors,
            n_bits,
            mse_analytic,
            squared_error,
            n_estimates,
            transmit_power,
        })
    }

    /// All cells of channel `index`, ordered by Eb/N0 then design.
    pub fn run_channel(&self, index: usize) -> Result<Vec<CellRecord>> {
        let ctx = self.channel_context(index)?;
        let mut out = Vec::with_capacity(self.cfg.ebn0_db.len() * self.cfg.designs.len());
        for &ebn0 in &self.cfg.ebn0_db {
            for &design in &self.cfg.designs {
                out.push(self.run_cell(&ctx, design, ebn0)?);
            }
        }
        Ok(out)
    }

    /// Runs the full grid on `threads` workers (`0` = rayon default).
    pub fn sweep(&self, threads: usize) -> Result<SimRunResult> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let per_channel: Vec<Vec<CellRecord>> = pool.install(|| {
            (0..self.cfg.channels)
                .into_par_iter()
                .map(|c| self.run_channel(c))
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(self.aggregate(&per_channel))
    }

    /// Combines per-channel records: bit errors and squared errors are summed,
    /// analytic MSE is averaged over channels.
    pub fn aggregate(&self, per_channel: &[Vec<CellRecord>]) -> SimRunResult {
        let mut rows = Vec::new();
        for &design in &self.cfg.designs {
            for &ebn0 in &self.cfg.ebn0_db {
                let cells: Vec<&CellRecord> = per_channel
                    .iter()
                    .flatten()
                    .filter(|c| c.design == design && c.ebn0_db == ebn0)
                    .collect();
                let errors: u64 = cells.iter().map(|c| c.bit_errors).sum();
                let bits: u64 = cells.iter().map(|c| c.n_bits).sum();
                let sq: f64 = cells.iter().map(|c| c.squared_error).sum();
                let n_est: u64 = cells.iter().map(|c| c.n_estimates).sum();
                let mse_a = cells.iter().map(|c| c.mse_analytic).sum::<f64>() / cells.len().max(1) as f64;
                rows.push(ResultRow {
                    design,
                    ebn0_db: ebn0,
                    ber: errors as f64 / bits.max(1) as f64,
                    mse_analytic: mse_a,
                    mse_empirical: sq / n_est.max(1) as f64,
                    n_bits: bits,
                    n_channels: cells.len(),
                    seed: self.cfg.seed,
                });
            }
        }
        SimRunResult {
            rows,
            header: self.header(),
        }
    }

    /// CSV header lines: configuration echo and conventions.
    pub fn header(&self) -> Vec<String> {
        let t = self.cfg.transient();
        let mut h = self.cfg.echo();
        h.push(format!(
            "pseudo_snr=sigma_eta^2 = E_s*(M_u/M)/(log2(Q)*10^(EbN0/10)), E_s={}",
            self.qam.symbol_energy()
        ));
        h.push(format!(
            "transient=first and last {t} of {} half-symbols per subcarrier excluded",
            2 * self.cfg.block_len
        ));
        h.push(format!(
            "latency=linear {} feedback {}; N={}; tau={}",
            self.latencies.linear, self.latencies.feedback, self.n, self.tau
        ));
        h
    }
}

/// Bit errors over the symbols whose two half-symbols both lie in `counted`.
pub fn count_bit_errors(sent: &QamGrid, decided: &QamGrid, counted: std::ops::Range<usize>) -> (u64, u64) {
    let qam = sent.qam;
    let mut errors = 0u64;
    let mut bits = 0u64;
    for (s_row, d_row) in sent.symbols.iter().zip(&decided.symbols) {
        for (j, (s, d)) in s_row.iter().zip(d_row).enumerate() {
            if 2 * j < counted.start || 2 * j + 1 >= counted.end {
                continue;
            }
            let a = qam.demodulate(std::slice::from_ref(s));
            let b = qam.demodulate(std::slice::from_ref(d));
            errors += a.iter().zip(&b).filter(|(x, y)| x != y).count() as u64;
            bits += a.len() as u64;
        }
    }
    (errors, bits)
}
