#pragma once

#include "covarnav/ablation.hpp"
#include "covarnav/architecture.hpp"
#include "covarnav/baselines.hpp"
#include "covarnav/checkpoint.hpp"
#include "covarnav/common.hpp"
#include "covarnav/config.hpp"
#include "covarnav/covariance_navigation.hpp"
#include "covarnav/dataset.hpp"
#include "covarnav/embeddings.hpp"
#include "covarnav/forgetting.hpp"
#include "covarnav/inversion.hpp"
#include "covarnav/losses.hpp"
#include "covarnav/metrics.hpp"
#include "covarnav/network.hpp"
#include "covarnav/optim.hpp"
#include "covarnav/report.hpp"
#include "covarnav/training.hpp"
