//! Bid construction from microgrid abstractions, a merit-order market
//! clearing with uniform pricing, and the current-practice proportional
//! disaggregation used as the comparison baseline.

use crate::abstraction::MicrogridAbstraction;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MarketError {
    #[error("aggregator {0} has zero capacity and cannot bid")]
    ZeroCapacity(usize),
    #[error("insufficient capacity: required {required}, offered {available}")]
    InsufficientCapacity { required: f64, available: f64 },
    #[error("all mileages are zero; proportional allocation undefined")]
    AllMileagesZero,
    #[error("no bids")]
    EmptyBids,
    #[error("mismatched input lengths")]
    MismatchedLengths,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarketSide {
    Up,
    Down,
}

/// One aggregator's offer into a regulation market.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RegulationBid {
    pub aggregator: usize,
    pub side: MarketSide,
    /// Offered regulation capacity (kW, nonnegative).
    pub capacity: f64,
    /// Expected mileage over the period (kW).
    pub mileage: f64,
    /// Unit price of capacity ($/kW).
    pub capacity_price: f64,
}

/// Build the bid triple from an abstraction: capacity is the magnitude of the
/// relevant capacity bound, mileage is `k` times the ramp rate at the extreme
/// dispatch, and the capacity price spreads the extreme dispatch cost over
/// the offered capacity.
pub fn make_bid(
    abs: &MicrogridAbstraction,
    aggregator: usize,
    k: f64,
    side: MarketSide,
) -> Result<RegulationBid, MarketError> {
    let (capacity, ramp, cost) = match side {
        MarketSide::Up => (
            abs.up_capacity().abs(),
            abs.ramp_at_g_up(),
            abs.cost_at_g_up(),
        ),
        // the down side mirrors Table I using the sampled curves at the
        // down-capacity end
        MarketSide::Down => (
            abs.down_capacity(),
            abs.ramp(abs.down_capacity()),
            abs.cost(abs.down_capacity()),
        ),
    };
    if capacity <= 0.0 {
        return Err(MarketError::ZeroCapacity(aggregator));
    }
    Ok(RegulationBid {
        aggregator,
        side,
        capacity,
        mileage: k * ramp,
        capacity_price: cost / capacity,
    })
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AggregatorAward {
    pub aggregator: usize,
    pub cleared_capacity: f64,
    pub cleared_mileage: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MarketAward {
    pub side: MarketSide,
    pub awards: Vec<AggregatorAward>,
    /// Uniform capacity price: the price of the marginal (last awarded) bid.
    pub clearing_price: f64,
}

/// Merit-order clearing: award capacity by ascending price (ties by
/// aggregator id) until the requirement is met; the marginal bid is awarded
/// partially and sets the uniform price. Mileage is prorated with capacity.
pub fn clear_market(bids: &[RegulationBid], requirement: f64) -> Result<MarketAward, MarketError> {
    if bids.is_empty() {
        return Err(MarketError::EmptyBids);
    }
    let side = bids[0].side;
    let available: f64 = bids.iter().map(|b| b.capacity).sum();
    if available < requirement {
        return Err(MarketError::InsufficientCapacity {
            required: requirement,
            available,
        });
    }
    let mut order: Vec<usize> = (0..bids.len()).collect();
    order.sort_by(|&a, &b| {
        bids[a]
            .capacity_price
            .partial_cmp(&bids[b].capacity_price)
            .unwrap()
            .then(bids[a].aggregator.cmp(&bids[b].aggregator))
    });
    let mut remaining = requirement;
    let mut cleared = vec![0.0; bids.len()];
    let mut clearing_price = 0.0;
    for &i in &order {
        if remaining <= 0.0 {
            break;
        }
        let take = bids[i].capacity.min(remaining);
        cleared[i] = take;
        remaining -= take;
        if take > 0.0 {
            clearing_price = bids[i].capacity_price;
        }
    }
    let awards = bids
        .iter()
        .enumerate()
        .map(|(i, b)| AggregatorAward {
            aggregator: b.aggregator,
            cleared_capacity: cleared[i],
            cleared_mileage: if b.capacity > 0.0 {
                b.mileage * cleared[i] / b.capacity
            } else {
                0.0
            },
        })
        .collect();
    Ok(MarketAward {
        side,
        awards,
        clearing_price,
    })
}

/// Split `total` across resources in proportion to their mileages, clamping
/// every setpoint into its box and redistributing the overshoot among the
/// still-unclamped resources until a fixed point. Returns the setpoints and
/// the unallocated residual (`total - sum`, zero unless everything clamps).
pub fn proportional_allocation(
    mileages: &[f64],
    boxes: &[(f64, f64)],
    total: f64,
) -> Result<(Vec<f64>, f64), MarketError> {
    let n = mileages.len();
    if n == 0 {
        return Err(MarketError::EmptyBids);
    }
    if boxes.len() != n {
        return Err(MarketError::MismatchedLengths);
    }
    if mileages.iter().all(|&m| m <= 0.0) {
        return Err(MarketError::AllMileagesZero);
    }
    let mut x = vec![0.0; n];
    let mut clamped = vec![false; n];
    // zero-mileage resources never receive a share; they sit at the point of
    // their box closest to zero
    for i in 0..n {
        if mileages[i] <= 0.0 {
            x[i] = 0.0f64.clamp(boxes[i].0, boxes[i].1);
            clamped[i] = true;
        }
    }
    // each round clamps at least one resource, so n rounds suffice
    for _ in 0..n {
        let weight: f64 = (0..n).filter(|&i| !clamped[i]).map(|i| mileages[i]).sum();
        if weight <= 0.0 {
            break;
        }
        let assigned: f64 = (0..n).filter(|&i| clamped[i]).map(|i| x[i]).sum();
        let remaining = total - assigned;
        let mut any_new = false;
        for i in 0..n {
            if clamped[i] {
                continue;
            }
            let target = remaining * mileages[i] / weight;
            if target < boxes[i].0 || target > boxes[i].1 {
                x[i] = target.clamp(boxes[i].0, boxes[i].1);
                clamped[i] = true;
                any_new = true;
            }
        }
        if !any_new {
            for i in 0..n {
                if !clamped[i] {
                    x[i] = remaining * mileages[i] / weight;
                }
            }
            break;
        }
    }
    let residual = total - x.iter().sum::<f64>();
    Ok((x, residual))
}

/// The current-practice allocation against cleared awards: mileage-
/// proportional with magnitudes capped by the cleared capacities.
pub fn current_practice_allocation(
    award: &MarketAward,
    agc_total: f64,
) -> Result<(Vec<f64>, f64), MarketError> {
    let mileages: Vec<f64> = award.awards.iter().map(|a| a.cleared_mileage).collect();
    let boxes: Vec<(f64, f64)> = award
        .awards
        .iter()
        .map(|a| (-a.cleared_capacity, a.cleared_capacity))
        .collect();
    proportional_allocation(&mileages, &boxes, agc_total)
}
