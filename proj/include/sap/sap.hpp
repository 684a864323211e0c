#pragma once

#include "sap/autodiff.hpp"
#include "sap/chat_client.hpp"
#include "sap/checkpoint.hpp"
#include "sap/dataset.hpp"
#include "sap/description_catalog.hpp"
#include "sap/encoder.hpp"
#include "sap/eval_protocols.hpp"
#include "sap/hashing.hpp"
#include "sap/linalg.hpp"
#include "sap/objective.hpp"
#include "sap/run_config.hpp"
#include "sap/semantic_alignment.hpp"
#include "sap/toy_data.hpp"
#include "sap/toy_encoder.hpp"
#include "sap/trainer.hpp"
