// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "querec/cf.hpp"
#include "querec/dataset.hpp"
#include "querec/embed.hpp"
#include "querec/error.hpp"
#include "querec/fusion.hpp"
#include "querec/hash.hpp"
#include "querec/io.hpp"
#include "querec/llm_client.hpp"
#include "querec/log.hpp"
#include "querec/matrix_io.hpp"
#include "querec/metrics.hpp"
#include "querec/pipeline.hpp"
#include "querec/querygen.hpp"
#include "querec/ranking.hpp"
#include "querec/vectorstore.hpp"
