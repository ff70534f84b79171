use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::{ClientDataset, DataError, Dataset, Population};

/// Fraction of clients that take part in training.
pub const SEEN_FRACTION: f64 = 0.9;

const VAL_FRACTION: f64 = 0.1;
const TEST_FRACTION: f64 = 0.1;

/// Each client receives `classes_per_client` distinct classes; every class
/// is owned by at least one client and its examples are shared evenly
/// among its owners.
pub fn fixed_classes_split<R: Rng + ?Sized>(
    dataset: &Dataset,
    clients: usize,
    classes_per_client: usize,
    rng: &mut R,
) -> Result<Population, DataError> {
    let c = dataset.classes();
    if clients == 0 {
        return Err(DataError::Parameter("client count must be positive".into()));
    }
    if classes_per_client == 0 || classes_per_client > c {
        return Err(DataError::Parameter(format!("classes per client must be in 1..={c}, got {classes_per_client}")));
    }
    if clients * classes_per_client < c {
        return Err(DataError::Parameter(format!(
            "{clients} clients x {classes_per_client} classes cannot cover all {c} classes"
        )));
    }
    // least-used classes first, random tie-breaking
    let mut usage = vec![0usize; c];
    let mut assigned: Vec<Vec<usize>> = Vec::with_capacity(clients);
    for _ in 0..clients {
        let mut order: Vec<usize> = (0..c).collect();
        order.shuffle(rng);
        order.sort_by_key(|&k| usage[k]);
        let mut mine: Vec<usize> = order[..classes_per_client].to_vec();
        mine.sort_unstable();
        for &k in &mine {
            usage[k] += 1;
        }
        assigned.push(mine);
    }

    let mut per_client: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for (class, mut pool) in dataset.class_indices().into_iter().enumerate() {
        let owners: Vec<usize> = (0..clients).filter(|&i| assigned[i].contains(&class)).collect();
        if pool.len() < owners.len() {
            return Err(DataError::InsufficientData {
                clients,
                examples: dataset.len(),
                msg: format!("class {class} has {} examples for {} owners", pool.len(), owners.len()),
            });
        }
        pool.shuffle(rng);
        let (base, extra) = (pool.len() / owners.len(), pool.len() % owners.len());
        let mut start = 0;
        for (j, &owner) in owners.iter().enumerate() {
            let take = base + usize::from(j < extra);
            per_client[owner].extend_from_slice(&pool[start..start + take]);
            start += take;
        }
    }

    let built = per_client
        .into_iter()
        .enumerate()
        .map(|(i, idx)| {
            let props = empirical_proportions(dataset, &idx);
            make_client(i as u32, idx, props, rng)
        })
        .collect();
    let (seen_ids, unseen_ids) = partition_seen_unseen(clients, rng);
    Ok(Population { clients: built, seen_ids, unseen_ids })
}

/// Per-client class proportions `π_i ~ Dir(α)`, each client receiving
/// `⌊N / n⌋` examples.
pub fn dirichlet_split<R: Rng + ?Sized>(dataset: &Dataset, clients: usize, alpha: f64, rng: &mut R) -> Result<Population, DataError> {
    let quota = if clients == 0 { 0 } else { dataset.len() / clients };
    dirichlet_split_with_quota(dataset, clients, alpha, quota, rng)
}

/// [`dirichlet_split`] with an explicit per-client example quota.
///
/// When a class runs out, the shortfall is drawn from the classes that still
/// have examples, proportionally to the client's `π` restricted to them
/// (or to availability when that restriction has no mass). The stored
/// proportions are those of the examples the client actually received.
pub fn dirichlet_split_with_quota<R: Rng + ?Sized>(
    dataset: &Dataset,
    clients: usize,
    alpha: f64,
    quota: usize,
    rng: &mut R,
) -> Result<Population, DataError> {
    let (seen_ids, unseen_ids) = validate_and_partition(dataset, clients, quota, &[alpha], rng)?;
    let alphas = vec![alpha; clients];
    allocate_dirichlet(dataset, &alphas, quota, seen_ids, unseen_ids, rng)
}

/// Seen clients drawn with `alpha_train`, unseen clients with `alpha_new`.
pub fn extrapolation_population<R: Rng + ?Sized>(
    dataset: &Dataset,
    clients: usize,
    alpha_train: f64,
    alpha_new: f64,
    rng: &mut R,
) -> Result<Population, DataError> {
    let quota = if clients == 0 { 0 } else { dataset.len() / clients };
    let (seen_ids, unseen_ids) = validate_and_partition(dataset, clients, quota, &[alpha_train, alpha_new], rng)?;
    let mut alphas = vec![alpha_train; clients];
    for &u in &unseen_ids {
        alphas[u as usize] = alpha_new;
    }
    allocate_dirichlet(dataset, &alphas, quota, seen_ids, unseen_ids, rng)
}

fn validate_and_partition<R: Rng + ?Sized>(
    dataset: &Dataset,
    clients: usize,
    quota: usize,
    alphas: &[f64],
    rng: &mut R,
) -> Result<(Vec<u32>, Vec<u32>), DataError> {
    if clients == 0 {
        return Err(DataError::Parameter("client count must be positive".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
        return Err(DataError::Parameter(format!("Dirichlet concentration must be positive and finite, got {a}")));
    }
    if quota == 0 || quota * clients > dataset.len() {
        return Err(DataError::InsufficientData {
            clients,
            examples: dataset.len(),
            msg: format!("per-client quota {quota} is not satisfiable"),
        });
    }
    Ok(partition_seen_unseen(clients, rng))
}

fn allocate_dirichlet<R: Rng + ?Sized>(
    dataset: &Dataset,
    alphas: &[f64],
    quota: usize,
    seen_ids: Vec<u32>,
    unseen_ids: Vec<u32>,
    rng: &mut R,
) -> Result<Population, DataError> {
    let c = dataset.classes();
    let mut pools = dataset.class_indices();
    for p in &mut pools {
        p.shuffle(rng);
    }
    let mut out = Vec::with_capacity(alphas.len());
    for (i, &alpha) in alphas.iter().enumerate() {
        let pi = sample_dirichlet(c, alpha, rng);
        let mut want = largest_remainder(&pi, quota);
        let mut idx = Vec::with_capacity(quota);
        loop {
            let mut short = 0;
            for k in 0..c {
                let take = want[k].min(pools[k].len());
                let at = pools[k].len() - take;
                idx.extend(pools[k].drain(at..));
                short += want[k] - take;
                want[k] = 0;
            }
            let live: Vec<usize> = (0..c).filter(|&k| !pools[k].is_empty()).collect();
            if short == 0 || live.is_empty() {
                break;
            }
            let mass: f64 = live.iter().map(|&k| pi[k]).sum();
            let weights: Vec<f64> = if mass > 0.0 {
                (0..c).map(|k| if pools[k].is_empty() { 0.0 } else { pi[k] / mass }).collect()
            } else {
                let avail: usize = live.iter().map(|&k| pools[k].len()).sum();
                (0..c).map(|k| pools[k].len() as f64 / avail as f64).collect()
            };
            want = largest_remainder(&weights, short);
        }
        if idx.is_empty() {
            return Err(DataError::InsufficientData {
                clients: alphas.len(),
                examples: dataset.len(),
                msg: format!("client {i} received no examples"),
            });
        }
        let props = empirical_proportions(dataset, &idx);
        out.push(make_client(i as u32, idx, props, rng));
    }
    Ok(Population { clients: out, seen_ids, unseen_ids })
}

/// Samples from `Dir(α, …, α)` by normalising independent Gamma draws.
pub fn sample_dirichlet<R: Rng + ?Sized>(classes: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..classes).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|g| g / total).collect()
    } else {
        // every draw underflowed: all mass on one class
        let hot = rng.random_range(0..classes);
        (0..classes).map(|k| if k == hot { 1.0 } else { 0.0 }).collect()
    }
}

/// Integer counts summing to `total` closest to `weights * total`.
fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

fn empirical_proportions(dataset: &Dataset, idx: &[usize]) -> Vec<f64> {
    let mut counts = vec![0.0; dataset.classes()];
    for &i in idx {
        counts[dataset.label(i)] += 1.0;
    }
    let n = idx.len().max(1) as f64;
    counts.into_iter().map(|c| c / n).collect()
}

/// Shuffles a client's examples and cuts them 80/10/10 into train/val/test.
fn make_client<R: Rng + ?Sized>(id: u32, mut idx: Vec<usize>, proportions: Vec<f64>, rng: &mut R) -> ClientDataset {
    idx.shuffle(rng);
    let m = idx.len() as f64;
    let n_test = (m * TEST_FRACTION).round() as usize;
    let n_val = (m * VAL_FRACTION).round() as usize;
    let test = idx.split_off(idx.len() - n_test);
    let val = idx.split_off(idx.len() - n_val);
    ClientDataset { client_id: id, train: idx, val, test, proportions }
}

/// Number of held-out clients in a population of `clients`.
pub fn unseen_count(clients: usize) -> usize {
    ((1.0 - SEEN_FRACTION) * clients as f64).round() as usize
}

/// Random 90/10 seen/unseen partition; both id lists sorted.
pub fn partition_seen_unseen<R: Rng + ?Sized>(clients: usize, rng: &mut R) -> (Vec<u32>, Vec<u32>) {
    let unseen_count = unseen_count(clients);
    let mut ids: Vec<u32> = (0..clients as u32).collect();
    ids.shuffle(rng);
    let mut unseen = ids[..unseen_count].to_vec();
    let mut seen = ids[unseen_count..].to_vec();
    seen.sort_unstable();
    unseen.sort_unstable();
    (seen, unseen)
}

pub fn proportion_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Shannon entropy (nats) of a class-proportion vector.
pub fn label_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn dataset(classes: usize, per_class: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        synth_dataset(&SynthConfig { classes, per_class, image_size: 16, ..SynthConfig::default() }, &mut rng).unwrap()
    }

    fn assert_partition(pop: &Population, n_examples: usize, exhaustive: bool) {
        let mut seen = HashSet::new();
        for c in &pop.clients {
            for i in c.all_indices() {
                assert!(seen.insert(i), "example {i} assigned twice");
            }
            let tr: HashSet<_> = c.train.iter().collect();
            assert!(c.test.iter().all(|i| !tr.contains(i)));
            assert!(c.val.iter().all(|i| !tr.contains(i)));
            assert!((c.proportions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        if exhaustive {
            assert_eq!(seen.len(), n_examples);
        }
        let ids: HashSet<u32> = pop.seen_ids.iter().chain(&pop.unseen_ids).copied().collect();
        assert_eq!(ids.len(), pop.clients.len());
        assert_eq!(pop.seen_ids.len() + pop.unseen_ids.len(), pop.clients.len());
    }

    #[test]
    fn fixed_classes_each_client_gets_exactly_its_classes() {
        let ds = dataset(10, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pop = fixed_classes_split(&ds, 20, 2, &mut rng).unwrap();
        assert_partition(&pop, ds.len(), true);
        for c in &pop.clients {
            assert_eq!(c.label_set(&ds).len(), 2);
        }
        assert_eq!(pop.seen_ids.len(), 18);
        assert_eq!(pop.unseen_ids.len(), 2);
    }

    #[test]
    fn single_client_owns_everything() {
        let ds = dataset(4, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pop = fixed_classes_split(&ds, 1, 4, &mut rng).unwrap();
        assert_eq!(pop.clients[0].all_indices().count(), 40);
        assert_eq!(pop.seen_ids, vec![0]);
        assert!(pop.unseen_ids.is_empty());
    }

    #[test]
    fn too_many_clients_is_an_error() {
        let ds = dataset(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(fixed_classes_split(&ds, 10, 1, &mut rng), Err(DataError::InsufficientData { .. })));
        assert!(fixed_classes_split(&ds, 1, 3, &mut rng).is_err());
    }

    #[test]
    fn dirichlet_proportions_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let p = sample_dirichlet(10, 0.1, &mut rng);
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert!(p.iter().all(|&x| x >= 0.0));
        }
        let flat = sample_dirichlet(10, 1000.0, &mut rng);
        assert!(flat.iter().all(|&x| (x - 0.1).abs() < 0.03), "{flat:?}");
    }

    #[test]
    fn dirichlet_split_partitions_dataset() {
        let ds = dataset(10, 60);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pop = dirichlet_split(&ds, 20, 0.1, &mut rng).unwrap();
        assert_partition(&pop, ds.len(), false);
        for c in &pop.clients {
            assert_eq!(c.all_indices().count(), 30);
        }
        assert!(dirichlet_split(&ds, 20, 0.0, &mut rng).is_err());
    }

    #[test]
    fn dirichlet_quota_follows_proportions_when_supply_is_ample() {
        let ds = dataset(5, 400);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pop = dirichlet_split_with_quota(&ds, 10, 0.5, 40, &mut rng).unwrap();
        for c in &pop.clients {
            let mut counts = vec![0usize; 5];
            for i in c.all_indices() {
                counts[ds.label(i)] += 1;
            }
            for (k, &n) in counts.iter().enumerate() {
                assert!((n as f64 - 40.0 * c.proportions[k]).abs() <= 1.0, "{counts:?} vs {:?}", c.proportions);
            }
        }
    }

    #[test]
    fn extrapolation_uses_separate_concentration() {
        let ds = dataset(10, 50);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pop = extrapolation_population(&ds, 20, 0.1, 1.0, &mut rng).unwrap();
        assert_partition(&pop, ds.len(), false);
        assert_eq!(pop.unseen_ids.len(), 2);
    }

    #[test]
    fn larger_alpha_means_higher_label_entropy() {
        let mut low = 0.0;
        let mut high = 0.0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            low += (0..50).map(|_| label_entropy(&sample_dirichlet(10, 0.1, &mut rng))).sum::<f64>();
            high += (0..50).map(|_| label_entropy(&sample_dirichlet(10, 1.0, &mut rng))).sum::<f64>();
        }
        assert!(high > low);
    }

    #[test]
    fn proportion_distances_symmetric_with_zero_diagonal() {
        let ds = dataset(6, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pop = dirichlet_split(&ds, 9, 0.3, &mut rng).unwrap();
        let d = pop.proportion_distances();
        for i in 0..9 {
            assert_eq!(d[i][i], 0.0);
            for j in 0..9 {
                assert_eq!(d[i][j], d[j][i]);
            }
        }
    }

    #[test]
    fn largest_remainder_sums_to_total() {
        assert_eq!(largest_remainder(&[0.5, 0.25, 0.25], 3).iter().sum::<usize>(), 3);
        assert_eq!(largest_remainder(&[1.0 / 3.0; 3], 10), vec![4, 3, 3]);
    }
}
